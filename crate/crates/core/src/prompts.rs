//! Class, task and general prompts and their per-task bundle.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::blob::{self, BlobMeta};
use crate::diffcore::{hash_named, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::inference::TaskKeys;
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// `L_t`
    pub task_len: usize,
    /// `L_g`; the readout is the first general token, so at least 1.
    pub general_len: usize,
    /// `Γ_t`
    pub task_depth: usize,
    /// `Γ_g`
    pub general_depth: usize,
    pub init_std: f64,
    pub init_log_sigma: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { task_len: 5, general_len: 1, task_depth: 2, general_depth: 1, init_std: 0.02, init_log_sigma: -2.0 }
    }
}

impl PromptConfig {
    pub fn validate(&self, backbone_depth: usize) -> Result<()> {
        if self.general_len == 0 {
            return Err(Error::Config("general_len must be at least 1 (it carries the readout token)".into()));
        }
        if self.task_depth == 0 || self.general_depth == 0 {
            return Err(Error::Config("prompt depths must be at least 1".into()));
        }
        if self.task_depth > backbone_depth || self.general_depth > backbone_depth {
            return Err(Error::Config(format!(
                "prompt depths ({}, {}) exceed the {backbone_depth} backbone layers",
                self.task_depth, self.general_depth
            )));
        }
        if !(self.init_std >= 0.0) || !self.init_log_sigma.is_finite() {
            return Err(Error::Config("prompt init scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn layout(&self, seq_len: usize, dim: usize) -> PromptLayout {
        PromptLayout {
            task_len: self.task_len,
            general_len: self.general_len,
            task_depth: self.task_depth,
            general_depth: self.general_depth,
            seq_len,
            dim,
        }
    }
}

/// Every tensor shape a [`TaskState`] may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub task_len: usize,
    pub general_len: usize,
    pub task_depth: usize,
    pub general_depth: usize,
    /// `L`, length of a (virtual) sequence embedding.
    pub seq_len: usize,
    pub dim: usize,
}

/// Diagonal Gaussian over `L × D` sequence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompt<S> {
    pub mu: Tensor<S>,
    pub log_sigma: Tensor<S>,
    pub task_index: usize,
    pub class_index_global: usize,
}

pub fn standard_normal<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(StandardNormal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

impl<S: Scalar> ClassPrompt<S> {
    pub fn sigma(&self) -> Tensor<S> {
        let data = self.log_sigma.data().iter().map(|v| v.exp()).collect();
        Tensor::new(self.log_sigma.shape().to_vec(), data).expect("same shape")
    }

    /// `mu + exp(log_sigma) ⊙ eps` outside any graph.
    pub fn sample_with(&self, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if eps.shape() != self.mu.shape() {
            return Err(Error::Shape(format!("eps {:?} vs prompt {:?}", eps.shape(), self.mu.shape())));
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .zip(eps.data())
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data)
    }
}

/// Draws one virtual sequence embedding from `cp`.
pub fn sample_virtual_embedding<S: Scalar>(cp: &ClassPrompt<S>, rng: &mut Rng) -> Tensor<S> {
    let eps = standard_normal(cp.mu.shape(), rng);
    cp.sample_with(&eps).expect("eps drawn with the prompt's shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState<S> {
    pub task_index: usize,
    /// Global index of the task's first class.
    pub class_offset: usize,
    pub num_classes: usize,
    /// `Γ_t` blocks of `L_t × D`.
    pub task_prompt: Vec<Tensor<S>>,
    /// `Γ_g` blocks of `L_g × D`.
    pub general_prompt: Vec<Tensor<S>>,
    /// Empty in modes that do not model class distributions.
    pub class_prompts: Vec<ClassPrompt<S>>,
    pub keys: Option<TaskKeys<S>>,
    /// Keys built from promptless representations, kept for comparison.
    pub naive_keys: Option<TaskKeys<S>>,
}

/// Fresh prompts for task `task_index`. Task and general blocks and class
/// means are `N(0, init_std²)`; every log-scale starts at `init_log_sigma`.
pub fn init_task_state<S: Scalar>(
    task_index: usize,
    class_offset: usize,
    num_classes: usize,
    cfg: &PromptConfig,
    layout: &PromptLayout,
    with_class_prompts: bool,
    seed: u64,
) -> TaskState<S> {
    let mut rng = rng::stream(seed, Stream::PromptInit, &[task_index as u64]);
    let d = layout.dim;
    let task_prompt = (0..cfg.task_depth).map(|_| Tensor::randn([cfg.task_len, d], cfg.init_std, &mut rng)).collect();
    let general_prompt =
        (0..cfg.general_depth).map(|_| Tensor::randn([cfg.general_len, d], cfg.init_std, &mut rng)).collect();
    let class_prompts = if with_class_prompts {
        (0..num_classes)
            .map(|m| ClassPrompt {
                mu: Tensor::randn([layout.seq_len, d], cfg.init_std, &mut rng),
                log_sigma: Tensor::full([layout.seq_len, d], S::of(cfg.init_log_sigma)),
                task_index,
                class_index_global: class_offset + m,
            })
            .collect()
    } else {
        Vec::new()
    };
    TaskState {
        task_index,
        class_offset,
        num_classes,
        task_prompt,
        general_prompt,
        class_prompts,
        keys: None,
        naive_keys: None,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskManifest {
    task_index: usize,
    class_offset: usize,
    num_classes: usize,
    class_prompts: usize,
    layout: PromptLayout,
    tensors: Vec<BlobMeta>,
}

impl<S: Scalar> TaskState<S> {
    /// All tensors with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, t) in self.task_prompt.iter().enumerate() {
            out.push((format!("task_prompt_{l}"), t));
        }
        for (l, t) in self.general_prompt.iter().enumerate() {
            out.push((format!("general_prompt_{l}"), t));
        }
        for (m, c) in self.class_prompts.iter().enumerate() {
            out.push((format!("class_{m}_mu"), &c.mu));
            out.push((format!("class_{m}_log_sigma"), &c.log_sigma));
        }
        if let Some(k) = &self.keys {
            out.push(("keys".into(), &k.centers));
        }
        if let Some(k) = &self.naive_keys {
            out.push(("naive_keys".into(), &k.centers));
        }
        out
    }

    pub fn hash(&self) -> String {
        let named = self.named_tensors();
        let mut h = hash_named(named.iter().map(|(n, t)| (n.as_str(), *t)));
        h.push_str(&format!(":{}:{}:{}", self.task_index, self.class_offset, self.num_classes));
        h
    }

    pub fn task_prompt_hash(&self) -> String {
        hash_named(self.task_prompt.iter().map(|t| ("t", t)))
    }

    pub fn general_prompt_hash(&self) -> String {
        hash_named(self.general_prompt.iter().map(|t| ("g", t)))
    }

    pub fn class_prompt_hash(&self) -> String {
        hash_named(self.class_prompts.iter().flat_map(|c| [("mu", &c.mu), ("ls", &c.log_sigma)]))
    }

    fn layout(&self) -> Result<PromptLayout> {
        let t = self.task_prompt.first().ok_or_else(|| Error::InvalidArgument("task state without task prompt".into()))?;
        let g = self.general_prompt.first().ok_or_else(|| Error::InvalidArgument("task state without general prompt".into()))?;
        let seq_len = self.class_prompts.first().map_or(0, |c| c.mu.rows());
        Ok(PromptLayout {
            task_len: t.rows(),
            general_len: g.rows(),
            task_depth: self.task_prompt.len(),
            general_depth: self.general_prompt.len(),
            seq_len,
            dim: t.cols(),
        })
    }

    /// Writes the state as a manifest plus one blob per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| blob::write_payload(dir, &name, t))
            .collect::<Result<Vec<_>>>()?;
        let manifest = TaskManifest {
            task_index: self.task_index,
            class_offset: self.class_offset,
            num_classes: self.num_classes,
            class_prompts: self.class_prompts.len(),
            layout: self.layout()?,
            tensors,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a state written by [`TaskState::save`], checking every shape
    /// against `expected` (sequence length is only checked when class
    /// prompts are present).
    pub fn load(dir: &Path, expected: &PromptLayout) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: TaskManifest = serde_json::from_slice(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let mut tensors = std::collections::BTreeMap::new();
        for meta in &m.tensors {
            tensors.insert(meta.name.clone(), blob::read_payload::<S>(dir, meta)?);
        }
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<S>> {
            let t = tensors.remove(&name).ok_or_else(|| Error::checkpoint(&path, format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!("{name}: stored {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let e = expected;
        let task_prompt = (0..e.task_depth)
            .map(|l| take(format!("task_prompt_{l}"), &[e.task_len, e.dim]))
            .collect::<Result<Vec<_>>>()?;
        let general_prompt = (0..e.general_depth)
            .map(|l| take(format!("general_prompt_{l}"), &[e.general_len, e.dim]))
            .collect::<Result<Vec<_>>>()?;
        let class_prompts = (0..m.class_prompts)
            .map(|c| {
                Ok(ClassPrompt {
                    mu: take(format!("class_{c}_mu"), &[e.seq_len, e.dim])?,
                    log_sigma: take(format!("class_{c}_log_sigma"), &[e.seq_len, e.dim])?,
                    task_index: m.task_index,
                    class_index_global: m.class_offset + c,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut key = |name: &str| -> Result<Option<TaskKeys<S>>> {
            match tensors.remove(name) {
                None => Ok(None),
                Some(centers) if centers.cols() == e.dim && centers.rows() >= 1 => {
                    Ok(Some(TaskKeys { task_index: m.task_index, centers }))
                }
                Some(c) => Err(Error::Shape(format!("{name}: stored {:?}, expected [K, {}]", c.shape(), e.dim))),
            }
        };
        let keys = key("keys")?;
        let naive_keys = key("naive_keys")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::checkpoint(&path, format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            task_index: m.task_index,
            class_offset: m.class_offset,
            num_classes: m.num_classes,
            task_prompt,
            general_prompt,
            class_prompts,
            keys,
            naive_keys,
        })
    }
}

/// Ordered collection of task states; tasks are initialized exactly once,
/// in order.
#[derive(Debug, Clone, Default)]
pub struct PromptBank<S> {
    pub states: Vec<TaskState<S>>,
}

impl<S: Scalar> PromptBank<S> {
    pub fn new() -> Self {
        Self { states: Vec::new() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn begin_task(
        &mut self,
        task_index: usize,
        class_offset: usize,
        num_classes: usize,
        cfg: &PromptConfig,
        layout: &PromptLayout,
        with_class_prompts: bool,
        seed: u64,
    ) -> Result<&mut TaskState<S>> {
        if task_index < self.states.len() {
            return Err(Error::InvalidArgument(format!("task {task_index} is already initialized")));
        }
        if task_index > self.states.len() {
            return Err(Error::InvalidArgument(format!(
                "task {task_index} initialized before task {}",
                self.states.len()
            )));
        }
        self.states.push(init_task_state(task_index, class_offset, num_classes, cfg, layout, with_class_prompts, seed));
        Ok(self.states.last_mut().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}
