//! Patch-embedding transformer backbone and the prompt-injection forward pass.
//!
//! Layers are pre-norm (attention then MLP, each with a residual). In the
//! prompted forward pass the layer input is `[general; task; body]`; the
//! first `general_depth` layers take a fresh general block and the first
//! `task_depth` layers a fresh task block, deeper layers carry the previous
//! layer's outputs at those positions. The adapted representation is the
//! final-norm output of the first general-prompt position.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Image, TaskSplit};
use crate::diffcore::blob::{self, BlobMeta};
use crate::diffcore::{hash_named, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::trainer::optim::Adam;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { image_side: 16, channels: 3, patch: 4, dim: 64, depth: 4, heads: 4, mlp_ratio: 2 }
    }
}

impl BackboneConfig {
    /// Number of patch tokens `L`.
    pub fn seq_len(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch) {
            return fail(format!("image side {} is not divisible by patch {}", self.image_side, self.patch));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return fail("depth, mlp_ratio and channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<S> {
    pub ln1_gain: Arc<Tensor<S>>,
    pub ln1_bias: Arc<Tensor<S>>,
    pub wq: Arc<Tensor<S>>,
    pub bq: Arc<Tensor<S>>,
    pub wk: Arc<Tensor<S>>,
    pub bk: Arc<Tensor<S>>,
    pub wv: Arc<Tensor<S>>,
    pub bv: Arc<Tensor<S>>,
    pub wo: Arc<Tensor<S>>,
    pub bo: Arc<Tensor<S>>,
    pub ln2_gain: Arc<Tensor<S>>,
    pub ln2_bias: Arc<Tensor<S>>,
    pub w1: Arc<Tensor<S>>,
    pub b1: Arc<Tensor<S>>,
    pub w2: Arc<Tensor<S>>,
    pub b2: Arc<Tensor<S>>,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "w1",
    "b1", "w2", "b2",
];

impl<S: Scalar> LayerParams<S> {
    fn fields(&self) -> [&Arc<Tensor<S>>; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Arc<Tensor<S>>; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// Frozen-after-pretraining backbone weights.
#[derive(Debug, Clone)]
pub struct BackboneParams<S> {
    pub config: BackboneConfig,
    pub patch_weight: Arc<Tensor<S>>,
    pub patch_bias: Arc<Tensor<S>>,
    pub pos_embed: Arc<Tensor<S>>,
    pub layers: Vec<LayerParams<S>>,
    pub norm_gain: Arc<Tensor<S>>,
    pub norm_bias: Arc<Tensor<S>>,
    frozen_hash: Option<String>,
}

/// Graph handles for every backbone tensor.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub vars: Vec<Var>,
}

struct BoundLayer<'a> {
    v: &'a [Var],
}

impl BoundLayer<'_> {
    fn get(&self, name: &str) -> Var {
        let i = LAYER_NAMES.iter().position(|n| *n == name).expect("known layer tensor");
        self.v[i]
    }
}

impl BoundBackbone {
    fn patch_weight(&self) -> Var {
        self.vars[0]
    }
    fn patch_bias(&self) -> Var {
        self.vars[1]
    }
    fn pos_embed(&self) -> Var {
        self.vars[2]
    }
    fn layer(&self, l: usize) -> BoundLayer<'_> {
        let start = 3 + l * LAYER_NAMES.len();
        BoundLayer { v: &self.vars[start..start + LAYER_NAMES.len()] }
    }
    fn norm(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Prompt blocks for one forward pass, already bound into the graph.
#[derive(Debug, Clone)]
pub struct PromptSchedule {
    /// `general_depth` blocks of `L_g × D`.
    pub general: Vec<Var>,
    /// `task_depth` blocks of `L_t × D`.
    pub task: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct PromptedForward {
    /// `[B × D]`, one adapted representation per input sequence.
    pub adapted: Var,
    /// Length of every layer's per-sample input sequence.
    pub layer_input_lengths: Vec<usize>,
}

fn randn_arc<S: Scalar>(shape: &[usize], std: f64, rng: &mut rng::Rng) -> Arc<Tensor<S>> {
    Arc::new(Tensor::randn(shape.to_vec(), std, rng))
}

fn zeros_arc<S: Scalar>(shape: &[usize]) -> Arc<Tensor<S>> {
    Arc::new(Tensor::zeros(shape.to_vec()))
}

fn ones_arc<S: Scalar>(shape: &[usize]) -> Arc<Tensor<S>> {
    Arc::new(Tensor::full(shape.to_vec(), S::one()))
}

impl<S: Scalar> BackboneParams<S> {
    /// Randomly initialized, unfrozen backbone.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::BackboneInit, &[]);
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let patch_weight = randn_arc(&[config.patch_dim(), d], inv(config.patch_dim()), &mut rng);
        let pos_embed = randn_arc(&[config.seq_len(), d], 0.1, &mut rng);
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                ln1_gain: ones_arc(&[d]),
                ln1_bias: zeros_arc(&[d]),
                wq: randn_arc(&[d, d], inv(d), &mut rng),
                bq: zeros_arc(&[d]),
                wk: randn_arc(&[d, d], inv(d), &mut rng),
                bk: zeros_arc(&[d]),
                wv: randn_arc(&[d, d], inv(d), &mut rng),
                bv: zeros_arc(&[d]),
                wo: randn_arc(&[d, d], inv(d), &mut rng),
                bo: zeros_arc(&[d]),
                ln2_gain: ones_arc(&[d]),
                ln2_bias: zeros_arc(&[d]),
                w1: randn_arc(&[d, hidden], inv(d), &mut rng),
                b1: zeros_arc(&[hidden]),
                w2: randn_arc(&[hidden, d], inv(hidden), &mut rng),
                b2: zeros_arc(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_weight,
            patch_bias: zeros_arc(&[d]),
            pos_embed,
            layers,
            norm_gain: ones_arc(&[d]),
            norm_bias: zeros_arc(&[d]),
            frozen_hash: None,
        })
    }

    /// All tensors with stable names, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Arc<Tensor<S>>)> {
        let mut out = vec![
            ("patch_weight".to_string(), &self.patch_weight),
            ("patch_bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.fields()) {
                out.push((format!("layer{l}_{name}"), t));
            }
        }
        out.push(("norm_gain".to_string(), &self.norm_gain));
        out.push(("norm_bias".to_string(), &self.norm_bias));
        out
    }

    fn tensors_mut(&mut self) -> Result<Vec<&mut Arc<Tensor<S>>>> {
        if self.frozen_hash.is_some() {
            return Err(Error::InvalidArgument("backbone is frozen".into()));
        }
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        Ok(out)
    }

    /// Bitwise SHA-256 over every parameter.
    pub fn compute_hash(&self) -> String {
        let named = self.named_tensors();
        hash_named(named.iter().map(|(n, t)| (n.as_str(), t.as_ref())))
    }

    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.compute_hash());
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    /// Re-hashes the parameters and compares with the hash recorded at freeze time.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            Some(h) if *h == self.compute_hash() => Ok(()),
            Some(_) => Err(Error::InvalidArgument("frozen backbone parameters changed".into())),
            None => Err(Error::InvalidArgument("backbone was never frozen".into())),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds every tensor into `g`; frozen parameters always bind as constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundBackbone {
        let trainable = trainable && !self.is_frozen();
        let vars = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| if trainable { g.param_shared(Arc::clone(t)) } else { g.constant_shared(Arc::clone(t)) })
            .collect();
        BoundBackbone { vars }
    }

    /// Flattens non-overlapping patches into an `[L × patch_dim]` matrix.
    pub fn patch_matrix(&self, image: &Image) -> Result<Tensor<S>> {
        let c = &self.config;
        let geo = image.geometry;
        if !geo.height.is_multiple_of(c.patch) || !geo.width.is_multiple_of(c.patch) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {} pixel patches",
                geo.height, geo.width, c.patch
            )));
        }
        if geo.height != c.image_side || geo.width != c.image_side || geo.channels != c.channels {
            return Err(Error::Shape(format!(
                "{geo:?} image for a {}x{}x{} backbone",
                c.image_side, c.image_side, c.channels
            )));
        }
        let per_side = c.image_side / c.patch;
        let mut data = Vec::with_capacity(c.seq_len() * c.patch_dim());
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..c.patch {
                    for col in 0..c.patch {
                        for ch in 0..c.channels {
                            data.push(S::of(image.at(pr * c.patch + r, pc * c.patch + col, ch) as f64));
                        }
                    }
                }
            }
        }
        Tensor::new([c.seq_len(), c.patch_dim()], data)
    }

    /// Sequence embedding `f = patches · W + b + pos` bound into `g`.
    pub fn embed_var(&self, g: &mut Graph<S>, bound: &BoundBackbone, image: &Image) -> Result<Var> {
        let patches = g.constant(self.patch_matrix(image)?);
        let proj = g.matmul(patches, bound.patch_weight())?;
        let proj = g.add_row(proj, bound.patch_bias())?;
        g.add(proj, bound.pos_embed())
    }

    /// Sequence embedding `[L × D]` of `image` under the current weights.
    pub fn patch_embed(&self, image: &Image) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = self.embed_var(&mut g, &bound, image)?;
        Ok(g.value(f).clone())
    }

    fn affine_norm(g: &mut Graph<S>, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x);
        let n = g.mul_row(n, gain)?;
        g.add_row(n, bias)
    }

    fn linear(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// One pre-norm layer over `batch` stacked sequences of length `seq`.
    /// With `readout_only` the result holds only the first position of each
    /// sequence (`[batch × D]`).
    fn layer(
        &self,
        g: &mut Graph<S>,
        bl: &BoundLayer<'_>,
        x: Var,
        batch: usize,
        seq: usize,
        readout_only: bool,
    ) -> Result<Var> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = Self::affine_norm(g, x, bl.get("ln1_gain"), bl.get("ln1_bias"))?;
        let k = Self::linear(g, h, bl.get("wk"), bl.get("bk"))?;
        let v = Self::linear(g, h, bl.get("wv"), bl.get("bv"))?;
        let (x_out, h_q, q_rows) = if readout_only {
            let xs: Vec<Var> = (0..batch).map(|b| g.slice_rows(x, b * seq, 1)).collect::<Result<_>>()?;
            let hs: Vec<Var> = (0..batch).map(|b| g.slice_rows(h, b * seq, 1)).collect::<Result<_>>()?;
            (g.concat_rows(&xs)?, g.concat_rows(&hs)?, 1)
        } else {
            (x, h, seq)
        };
        let q = Self::linear(g, h_q, bl.get("wq"), bl.get("bq"))?;

        let mut per_sample = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qb = g.slice_block(q, b * q_rows, hd * dh, q_rows, dh)?;
                let kb = g.slice_block(k, b * seq, hd * dh, seq, dh)?;
                let vb = g.slice_block(v, b * seq, hd * dh, seq, dh)?;
                let scores = g.matmul_t(qb, kb)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                head_out.push(g.matmul(attn, vb)?);
            }
            per_sample.push(g.concat_cols(&head_out)?);
        }
        let o = g.concat_rows(&per_sample)?;
        let o = Self::linear(g, o, bl.get("wo"), bl.get("bo"))?;
        let x1 = g.add(x_out, o)?;

        let h2 = Self::affine_norm(g, x1, bl.get("ln2_gain"), bl.get("ln2_bias"))?;
        let m = Self::linear(g, h2, bl.get("w1"), bl.get("b1"))?;
        let m = g.gelu(m);
        let m = Self::linear(g, m, bl.get("w2"), bl.get("b2"))?;
        g.add(x1, m)
    }

    /// Multi-layer prompt-injection forward pass over a batch of `[L × D]`
    /// sequence embeddings (real or virtual).
    pub fn forward_with_prompts(
        &self,
        g: &mut Graph<S>,
        bound: &BoundBackbone,
        seqs: &[Var],
        sched: &PromptSchedule,
    ) -> Result<PromptedForward> {
        let n_layers = self.config.depth;
        let (gd, td) = (sched.general.len(), sched.task.len());
        if gd == 0 || td == 0 {
            return Err(Error::InvalidArgument("prompt schedule needs at least one general and one task block".into()));
        }
        if gd > n_layers || td > n_layers {
            return Err(Error::InvalidArgument(format!(
                "prompt depth (general {gd}, task {td}) exceeds the {n_layers} backbone layers"
            )));
        }
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let lg = g.value(sched.general[0]).rows();
        let lt = g.value(sched.task[0]).rows();
        if lg == 0 {
            return Err(Error::InvalidArgument("general prompt length must be at least 1 for the readout".into()));
        }
        let d = self.config.dim;
        for &p in sched.general.iter().chain(&sched.task) {
            let v = g.value(p);
            let want = if sched.general.contains(&p) { lg } else { lt };
            if v.rows() != want || v.cols() != d {
                return Err(Error::Shape(format!("prompt block {:?} mismatches [{want}x{d}]", v.shape())));
            }
        }
        let body = g.value(seqs[0]).rows();
        for &s in seqs {
            let v = g.value(s);
            if v.rows() != body || v.cols() != d {
                return Err(Error::Shape(format!("sequence {:?} mismatches [{body}x{d}]", v.shape())));
            }
        }
        let seq = lg + lt + body;
        let batch = seqs.len();

        let mut lengths = Vec::with_capacity(n_layers);
        let mut x: Option<Var> = None;
        for l in 0..n_layers {
            let fresh_g = l < gd;
            let fresh_t = l < td;
            let input = match x {
                Some(prev) if !fresh_g && !fresh_t => prev,
                _ => {
                    let mut parts = Vec::with_capacity(batch * 3);
                    for (b, &s) in seqs.iter().enumerate() {
                        let off = b * seq;
                        parts.push(match (fresh_g, x) {
                            (true, _) | (false, None) => sched.general[l.min(gd - 1)],
                            (false, Some(prev)) => g.slice_rows(prev, off, lg)?,
                        });
                        if lt > 0 {
                            parts.push(match (fresh_t, x) {
                                (true, _) | (false, None) => sched.task[l.min(td - 1)],
                                (false, Some(prev)) => g.slice_rows(prev, off + lg, lt)?,
                            });
                        }
                        parts.push(match x {
                            None => s,
                            Some(prev) => g.slice_rows(prev, off + lg + lt, body)?,
                        });
                    }
                    g.concat_rows(&parts)?
                }
            };
            lengths.push(g.value(input).rows() / batch);
            let last = l + 1 == n_layers;
            x = Some(self.layer(g, &bound.layer(l), input, batch, seq, last)?);
        }
        let (ng, nb) = bound.norm();
        let adapted = Self::affine_norm(g, x.expect("depth >= 1"), ng, nb)?;
        Ok(PromptedForward { adapted, layer_input_lengths: lengths })
    }

    /// Promptless forward: mean over output tokens, then the final norm.
    /// Used for pretraining, the sequential-finetuning baseline, and naive keys.
    pub fn forward_plain(&self, g: &mut Graph<S>, bound: &BoundBackbone, seqs: &[Var]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let seq = g.value(seqs[0]).rows();
        let batch = seqs.len();
        let mut x = g.concat_rows(seqs)?;
        for l in 0..self.config.depth {
            x = self.layer(g, &bound.layer(l), x, batch, seq, false)?;
        }
        let mut pool = vec![S::zero(); batch * batch * seq];
        let w = S::one() / S::of(seq as f64);
        for b in 0..batch {
            for t in 0..seq {
                pool[b * batch * seq + b * seq + t] = w;
            }
        }
        let pool = g.constant(Tensor::new([batch, batch * seq], pool)?);
        let pooled = g.matmul(pool, x)?;
        let (ng, nb) = bound.norm();
        Self::affine_norm(g, pooled, ng, nb)
    }

    /// Promptless representations of `images`, one row each.
    pub fn represent_plain(&self, images: &[&Image]) -> Result<Vec<Tensor<S>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let seqs = images.iter().map(|im| self.embed_var(&mut g, &bound, im)).collect::<Result<Vec<_>>>()?;
        let reps = self.forward_plain(&mut g, &bound, &seqs)?;
        let t = g.value(reps);
        (0..t.rows()).map(|r| Tensor::new([t.cols()], t.row(r).to_vec())).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| blob::write_payload(dir, &name, t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let manifest = BackboneManifest {
            config: self.config.clone(),
            frozen_hash: self.frozen_hash.clone(),
            tensors,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: BackboneManifest =
            serde_json::from_slice(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let mut skeleton = Self::init(&m.config, 0)?;
        let names: Vec<String> = skeleton.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != m.tensors.len() {
            return Err(Error::checkpoint(&path, "tensor table does not match the config"));
        }
        let mut loaded = Vec::with_capacity(names.len());
        for (name, meta) in names.iter().zip(&m.tensors) {
            if *name != meta.name {
                return Err(Error::checkpoint(&path, format!("expected {name}, found {}", meta.name)));
            }
            loaded.push(Arc::new(blob::read_payload::<S>(dir, meta)?));
        }
        for (slot, (t, (_, want))) in
            skeleton.tensors_mut()?.into_iter().zip(loaded.into_iter().zip(Self::init(&m.config, 0)?.named_tensors()))
        {
            if t.shape() != want.shape() {
                return Err(Error::checkpoint(&path, format!("shape {:?} vs {:?}", t.shape(), want.shape())));
            }
            *slot = t;
        }
        skeleton.frozen_hash = m.frozen_hash.clone();
        if skeleton.frozen_hash.is_some() {
            skeleton.verify_frozen().map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        }
        Ok(skeleton)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BackboneManifest {
    config: BackboneConfig,
    frozen_hash: Option<String>,
    tensors: Vec<BlobMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 16, lr: 0.003 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    pub chance: f64,
}

fn plain_logits<S: Scalar>(
    bb: &BackboneParams<S>,
    g: &mut Graph<S>,
    bound: &BoundBackbone,
    images: &[&Image],
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let seqs = images.iter().map(|im| bb.embed_var(g, bound, im)).collect::<Result<Vec<_>>>()?;
    let reps = bb.forward_plain(g, bound, &seqs)?;
    let logits = g.matmul_t(reps, head_w)?;
    g.add_row(logits, head_b)
}

/// Supervised pretraining with a temporary linear head on classes disjoint
/// from every continual task; the head is discarded and the backbone frozen.
pub fn pretrain_backbone<S: Scalar>(
    mut backbone: BackboneParams<S>,
    split: &TaskSplit,
    continual_labels: &[u16],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(BackboneParams<S>, PretrainReport)> {
    if let Some(l) = split.labels.iter().find(|l| continual_labels.contains(l)) {
        return Err(Error::Data(format!("pretraining label {l} also appears in a continual task")));
    }
    let n_classes = split.num_classes();
    let chance = 1.0 / n_classes as f64;
    let mut final_loss = None;
    if cfg.epochs > 0 && !split.train.is_empty() {
        let mut rng = rng::stream(seed, Stream::Pretrain, &[]);
        let d = backbone.config.dim;
        let mut head_w = Tensor::<S>::randn([n_classes, d], 0.02, &mut rng);
        let mut head_b = Tensor::<S>::zeros([n_classes]);
        let mut adam = Adam::new(cfg.lr);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let images: Vec<&Image> = chunk.iter().map(|&i| &split.train[i].image).collect();
                let labels: Vec<usize> = chunk
                    .iter()
                    .map(|&i| split.local_index(split.train[i].label).expect("validated label"))
                    .collect();
                let mut g = Graph::new();
                let bound = backbone.bind(&mut g, true);
                let hw = g.param(head_w.clone());
                let hb = g.param(head_b.clone());
                let logits = plain_logits(&backbone, &mut g, &bound, &images, hw, hb)?;
                let loss = g.cross_entropy(logits, &labels)?;
                total += g.value(loss).item().as_f64();
                batches += 1;
                let grads = g.backward(loss)?;
                let mut params: Vec<&mut Tensor<S>> =
                    backbone.tensors_mut()?.into_iter().map(Arc::make_mut).collect();
                params.push(&mut head_w);
                params.push(&mut head_b);
                let grad_list: Vec<Tensor<S>> = bound
                    .vars
                    .iter()
                    .chain([&hw, &hb])
                    .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
                    .collect();
                let grad_refs: Vec<&Tensor<S>> = grad_list.iter().collect();
                adam.step(&mut params, &grad_refs)?;
            }
            let mean = total / batches as f64;
            info!("pretrain epoch {} loss {mean:.4}", epoch + 1);
            final_loss = Some(mean);
        }

        let heldout_accuracy = if split.test.is_empty() {
            None
        } else {
            let mut correct = 0;
            for chunk in split.test.chunks(32) {
                let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
                let mut g = Graph::new();
                let bound = backbone.bind(&mut g, false);
                let hw = g.constant(head_w.clone());
                let hb = g.constant(head_b.clone());
                let logits = plain_logits(&backbone, &mut g, &bound, &images, hw, hb)?;
                let lv = g.value(logits);
                for (r, s) in chunk.iter().enumerate() {
                    if argmax(lv.row(r)) == split.local_index(s.label).expect("validated label") {
                        correct += 1;
                    }
                }
            }
            Some(correct as f64 / split.test.len() as f64)
        };
        backbone.freeze();
        return Ok((
            backbone,
            PretrainReport { epochs: cfg.epochs, final_train_loss: final_loss, heldout_accuracy, chance },
        ));
    }
    backbone.freeze();
    Ok((backbone, PretrainReport { epochs: 0, final_train_loss: None, heldout_accuracy: None, chance }))
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Geometry;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig { image_side: 8, channels: 1, patch: 4, dim: 8, depth: 2, heads: 2, mlp_ratio: 2 }
    }

    fn image(cfg: &BackboneConfig, fill: impl Fn(usize) -> f32) -> Image {
        let g = Geometry { height: cfg.image_side, width: cfg.image_side, channels: cfg.channels };
        Image::new(g, (0..g.numel()).map(fill).collect()).unwrap()
    }

    #[test]
    fn patch_embed_shape_and_zero_image() {
        let cfg = BackboneConfig::default();
        let mut bb = BackboneParams::<f64>::init(&cfg, 1).unwrap();
        bb.patch_bias = Arc::new(Tensor::full([cfg.dim], 0.25));
        let f = bb.patch_embed(&image(&cfg, |_| 0.0)).unwrap();
        assert_eq!(f.shape(), &[16, 64]);
        for r in 0..16 {
            for c in 0..64 {
                assert_eq!(f.data()[r * 64 + c], 0.25 + bb.pos_embed.data()[r * 64 + c]);
            }
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let cfg = tiny_cfg();
        let bb = BackboneParams::<f64>::init(&cfg, 1).unwrap();
        let g = Geometry { height: 6, width: 6, channels: 1 };
        let img = Image::new(g, vec![0.0; 36]).unwrap();
        assert!(bb.patch_embed(&img).is_err());
        let bad = BackboneConfig { image_side: 10, ..tiny_cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sequence_length_bookkeeping() {
        let cfg = BackboneConfig { depth: 4, ..tiny_cfg() };
        let bb = BackboneParams::<f64>::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let f = bb.embed_var(&mut g, &bound, &image(&cfg, |i| (i % 5) as f32 * 0.2)).unwrap();
        for (gd, td) in [(1, 3), (3, 1), (2, 2), (4, 4)] {
            let general = (0..gd).map(|_| g.constant(Tensor::zeros([2, 8]))).collect();
            let task = (0..td).map(|_| g.constant(Tensor::zeros([3, 8]))).collect();
            let out = bb
                .forward_with_prompts(&mut g, &bound, &[f, f], &PromptSchedule { general, task })
                .unwrap();
            assert_eq!(out.layer_input_lengths, vec![2 + 3 + 4; 4]);
            assert_eq!(g.value(out.adapted).shape(), &[2, 8]);
        }
    }

    #[test]
    fn depth_beyond_layers_is_rejected() {
        let cfg = tiny_cfg();
        let bb = BackboneParams::<f64>::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let f = g.constant(Tensor::zeros([4, 8]));
        let general = vec![g.constant(Tensor::zeros([1, 8]))];
        let task = (0..3).map(|_| g.constant(Tensor::zeros([1, 8]))).collect();
        assert!(bb.forward_with_prompts(&mut g, &bound, &[f], &PromptSchedule { general, task }).is_err());
    }

    #[test]
    fn frozen_backbone_binds_as_constants() {
        let cfg = tiny_cfg();
        let mut bb = BackboneParams::<f64>::init(&cfg, 3).unwrap();
        bb.freeze();
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, true);
        assert!(bound.vars.iter().all(|&v| !g.requires_grad(v)));
        assert!(bb.verify_frozen().is_ok());
        assert!(bb.tensors_mut().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bb = BackboneParams::<f32>::init(&tiny_cfg(), 5).unwrap();
        bb.freeze();
        bb.save(dir.path()).unwrap();
        let back = BackboneParams::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.compute_hash(), bb.compute_hash());
        assert_eq!(back.frozen_hash(), bb.frozen_hash());
    }
}
