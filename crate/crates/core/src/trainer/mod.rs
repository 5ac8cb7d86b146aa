//! Sequential training over tasks. Each task runs a contrastive phase for
//! its general prompt, then per batch a discriminator step, a class-prompt
//! step and a task-prompt/classifier step, then builds its keys and is
//! evaluated together with every earlier task.

mod eval;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate_seen, predictions_to_csv, PredictionRow, TaskEval, PREDICTIONS_CSV_HEADER};

use crate::backbone::{argmax, BackboneParams, PromptSchedule};
use crate::data::{augment_pair, AugmentConfig, Image, SplitBenchmark, TaskSplit};
use crate::diffcore::{Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::{
    keys_from_queries, plain_batch, query_batch, InferenceOptions, KMeansConfig, QUERY_CHUNK,
};
use crate::losses::{
    bda_classifier_loss, bda_deception_loss, cke_loss, gke_loss, head_logits, ClassificationClassifier,
    DiscriminativeClassifier, LinearHead, LossRecord, Phase,
};
use crate::metrics::AccuracyMatrix;
use crate::prompts::{standard_normal, PromptBank, PromptConfig, TaskState};
use crate::rng::{self, Stream};
use optim::{Adam, Sgd};

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Class, task and general prompts.
    Hprompts,
    /// Task and general prompts, no class prompts or replay.
    Tgp,
    /// Task prompts only; the general prompt stays at its initialization.
    Tp,
    /// No prompts: the classifier alone is trained on promptless features.
    Ftseq,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ftseq, Mode::Tp, Mode::Tgp, Mode::Hprompts];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hprompts => "hprompts",
            Mode::Tgp => "tgp",
            Mode::Tp => "tp",
            Mode::Ftseq => "ftseq",
        }
    }

    pub fn prompted(self) -> bool {
        self != Mode::Ftseq
    }

    pub fn class_prompts(self) -> bool {
        self == Mode::Hprompts
    }

    pub fn general_phase(self) -> bool {
        matches!(self, Mode::Hprompts | Mode::Tgp)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected hprompts, tgp, tp or ftseq")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// `E_gke`
    pub gke_epochs: usize,
    /// `E_max`
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lr_class_prompt: f64,
    pub lr_task_prompt: f64,
    pub lr_general_prompt: f64,
    pub lr_classifier: f64,
    pub lr_discriminator: f64,
    pub head_init_std: f64,
    /// Keys per class, `o`.
    pub o_per_class: usize,
    pub augment: AugmentConfig,
    pub kmeans: KMeansConfig,
    pub inference: InferenceOptions,
    /// Record alignment and adversarial curves after every alignment epoch.
    pub diagnostics: bool,
    pub diagnostic_samples_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hprompts,
            gke_epochs: 5,
            max_epochs: 15,
            batch_size: 16,
            lambda: 0.1,
            tau: 0.1,
            lr_class_prompt: 0.02,
            lr_task_prompt: 0.006,
            lr_general_prompt: 0.001,
            lr_classifier: 0.001,
            lr_discriminator: 0.001,
            head_init_std: 0.02,
            o_per_class: 8,
            augment: AugmentConfig::default(),
            kmeans: KMeansConfig::default(),
            inference: InferenceOptions::default(),
            diagnostics: true,
            diagnostic_samples_per_class: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.gke_epochs > self.max_epochs {
            return fail(format!("gke_epochs {} exceeds max_epochs {}", self.gke_epochs, self.max_epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        let lrs = [
            self.lr_class_prompt,
            self.lr_task_prompt,
            self.lr_general_prompt,
            self.lr_classifier,
            self.lr_discriminator,
            self.head_init_std,
        ];
        if lrs.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return fail("learning rates and init scales must be finite and non-negative".into());
        }
        if self.o_per_class == 0 {
            return fail("o_per_class must be at least 1".into());
        }
        if self.kmeans.max_iter == 0 {
            return fail("kmeans.max_iter must be positive".into());
        }
        let a = &self.augment;
        if !(0.0 < a.min_scale && a.min_scale <= a.max_scale && a.max_scale <= 1.0)
            || !(0.0..=1.0).contains(&a.flip_prob)
            || !(a.noise_std >= 0.0)
        {
            return fail("augmentation parameters out of range".into());
        }
        Ok(())
    }
}

/// Curves measured after one alignment epoch of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEpoch {
    pub epoch: usize,
    /// Mean over classes of the cosine between the class's virtual and real
    /// representation means.
    pub mean_cosine: f64,
    /// Virtual representations assigned to the nearest real class centroid.
    pub virtual_nearest_centroid_accuracy: f64,
    /// Discriminator accuracy at telling real from virtual (which half of
    /// its outputs wins).
    pub discriminator_real_virtual_accuracy: f64,
    /// Cross-entropy of virtual samples against their true class.
    pub deception_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    pub task: usize,
    /// Mean contrastive loss of every general-prompt epoch.
    pub gke_epoch_loss: Vec<f64>,
    pub alignment: Vec<AlignmentEpoch>,
}

/// Hashes recorded while training, for freeze checks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntegrityLog {
    pub backbone_hash: String,
    /// Per task: task-prompt hash before and after its contrastive phase.
    pub task_prompt_around_gke: Vec<(String, String)>,
    /// Per task: general-prompt hash after its contrastive phase and at the
    /// end of the task.
    pub general_prompt_after_gke: Vec<(String, String)>,
    /// Per finished task: state hash when it finished and after the last task.
    pub past_state_hashes: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<S> {
    pub bank: PromptBank<S>,
    pub classifier: ClassificationClassifier<S>,
    pub acc: AccuracyMatrix,
    pub oracle_acc: AccuracyMatrix,
    pub evals: Vec<Vec<TaskEval>>,
    /// Rows of the final evaluation.
    pub predictions: Vec<PredictionRow>,
    pub losses: Vec<LossRecord>,
    pub diagnostics: Vec<TaskDiagnostics>,
    pub integrity: IntegrityLog,
    pub task_seconds: Vec<f64>,
}

/// Splits `order` into batches of `size`, folding a trailing single item
/// into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn grad_of<S: Scalar>(g: &Graph<S>, grads: &Gradients<S>, v: Var) -> Tensor<S> {
    grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
}

fn ensure_no_grad<S: Scalar>(grads: &Gradients<S>, vars: &[Var], what: &str) -> Result<()> {
    if vars.iter().any(|&v| grads.get(v).is_some()) {
        return Err(Error::InvalidArgument(format!("gradient reached {what}")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Drives training over the benchmark's tasks one at a time.
pub struct Learner<'a, S: Scalar> {
    pub backbone: &'a BackboneParams<S>,
    pub bench: &'a SplitBenchmark,
    pub train: TrainConfig,
    pub prompts: PromptConfig,
    pub seed: u64,
    pub bank: PromptBank<S>,
    pub classifier: ClassificationClassifier<S>,
    pub acc: AccuracyMatrix,
    pub oracle_acc: AccuracyMatrix,
    pub evals: Vec<Vec<TaskEval>>,
    pub predictions: Vec<PredictionRow>,
    pub losses: Vec<LossRecord>,
    pub diagnostics: Vec<TaskDiagnostics>,
    pub integrity: IntegrityLog,
    pub task_seconds: Vec<f64>,
    finished_hashes: Vec<String>,
    offsets: Vec<usize>,
}

impl<'a, S: Scalar> Learner<'a, S> {
    /// Checks the benchmark, backbone and configs before any training.
    pub fn new(
        backbone: &'a BackboneParams<S>,
        bench: &'a SplitBenchmark,
        train: TrainConfig,
        prompts: PromptConfig,
        seed: u64,
    ) -> Result<Self> {
        bench.validate()?;
        train.validate()?;
        prompts.validate(backbone.config.depth)?;
        backbone.verify_frozen()?;
        let geo = bench.geometry;
        let c = &backbone.config;
        if geo.height != c.image_side || geo.width != c.image_side || geo.channels != c.channels {
            return Err(Error::Config(format!(
                "benchmark images are {}x{}x{} but the backbone expects {}x{}x{}",
                geo.height, geo.width, geo.channels, c.image_side, c.image_side, c.channels
            )));
        }
        if train.mode.prompted() {
            for (i, t) in bench.tasks.iter().enumerate() {
                let k = train.o_per_class * t.num_classes();
                if t.train.len() < k {
                    return Err(Error::Config(format!(
                        "task {i} has {} training images, fewer than its {k} keys",
                        t.train.len()
                    )));
                }
            }
        }
        Ok(Self {
            backbone,
            bench,
            integrity: IntegrityLog { backbone_hash: backbone.compute_hash(), ..Default::default() },
            train,
            prompts,
            seed,
            bank: PromptBank::new(),
            classifier: LinearHead::empty(backbone.config.dim),
            acc: AccuracyMatrix::new(),
            oracle_acc: AccuracyMatrix::new(),
            evals: Vec::new(),
            predictions: Vec::new(),
            losses: Vec::new(),
            diagnostics: Vec::new(),
            task_seconds: Vec::new(),
            finished_hashes: Vec::new(),
            offsets: bench.class_offsets(),
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.acc.tasks()
    }

    pub fn is_finished(&self) -> bool {
        self.tasks_done() == self.bench.tasks.len()
    }

    /// Trains, keys and evaluates the next task.
    pub fn train_next_task(&mut self) -> Result<()> {
        let i = self.tasks_done();
        let split = self
            .bench
            .tasks
            .get(i)
            .ok_or_else(|| Error::InvalidArgument("every task is already trained".into()))?;
        let start = Instant::now();
        let classes = split.num_classes();
        let mut init_rng = rng::stream(self.seed, Stream::ClassifierInit, &[i as u64]);
        self.classifier.grow(classes, self.train.head_init_std, &mut init_rng);
        let mut diag = TaskDiagnostics { task: i, ..Default::default() };

        if self.train.mode.prompted() {
            let layout = self.prompts.layout(self.backbone.config.seq_len(), self.backbone.config.dim);
            self.bank.begin_task(
                i,
                self.offsets[i],
                classes,
                &self.prompts,
                &layout,
                self.train.mode.class_prompts(),
                self.seed,
            )?;
            let t_before = self.bank.states[i].task_prompt_hash();
            if self.train.mode.general_phase() {
                self.gke_phase(i, split, &mut diag)?;
            }
            let t_after = self.bank.states[i].task_prompt_hash();
            self.integrity.task_prompt_around_gke.push((t_before, t_after));
            let g_after = self.bank.states[i].general_prompt_hash();
            let mut cd = LinearHead::init(2 * classes, self.backbone.config.dim, self.train.head_init_std, &mut init_rng);
            self.joint_phase(i, split, &mut cd, &mut diag)?;
            let g_end = self.bank.states[i].general_prompt_hash();
            self.integrity.general_prompt_after_gke.push((g_after.clone(), g_end.clone()));
            if g_after != g_end {
                return Err(Error::InvalidArgument(format!("general prompt of task {i} changed after its phase")));
            }
            self.build_keys(i, split)?;
        } else {
            self.classifier_only_phase(i, split)?;
        }

        self.backbone.verify_frozen()?;
        for (j, h) in self.finished_hashes.iter().enumerate() {
            if self.bank.states[j].hash() != *h {
                return Err(Error::InvalidArgument(format!("state of finished task {j} changed")));
            }
        }
        if self.train.mode.prompted() {
            self.finished_hashes.push(self.bank.states[i].hash());
        }

        let (evals, rows) = evaluate_seen(
            self.backbone,
            self.train.mode,
            &self.bank.states,
            &self.classifier,
            self.bench,
            i,
            &self.train.inference,
            false,
        )?;
        self.acc.push_row(evals.iter().map(|e| e.accuracy).collect())?;
        self.oracle_acc.push_row(evals.iter().map(|e| e.oracle_accuracy).collect())?;
        info!(
            "task {} done: accuracy row {:?}, task-id {:?}",
            i + 1,
            evals.iter().map(|e| format!("{:.3}", e.accuracy)).collect::<Vec<_>>(),
            evals.iter().map(|e| format!("{:.3}", e.task_id_accuracy)).collect::<Vec<_>>()
        );
        self.evals.push(evals);
        self.predictions = rows;
        self.diagnostics.push(diag);
        self.task_seconds.push(start.elapsed().as_secs_f64());
        Ok(())
    }

    pub fn run(mut self) -> Result<RunOutcome<S>> {
        while !self.is_finished() {
            self.train_next_task()?;
        }
        self.integrity.past_state_hashes = self
            .finished_hashes
            .iter()
            .zip(&self.bank.states)
            .map(|(h, s)| (h.clone(), s.hash()))
            .collect();
        if self.backbone.compute_hash() != self.integrity.backbone_hash {
            return Err(Error::InvalidArgument("backbone changed during the run".into()));
        }
        Ok(RunOutcome {
            bank: self.bank,
            classifier: self.classifier,
            acc: self.acc,
            oracle_acc: self.oracle_acc,
            evals: self.evals,
            predictions: self.predictions,
            losses: self.losses,
            diagnostics: self.diagnostics,
            integrity: self.integrity,
            task_seconds: self.task_seconds,
        })
    }

    fn local_labels(split: &TaskSplit, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&k| split.local_index(split.train[k].label).expect("validated label")).collect()
    }

    fn bind_prompts(g: &mut Graph<S>, state: &TaskState<S>, general: bool, task: bool) -> PromptSchedule {
        let bind = |g: &mut Graph<S>, t: &Tensor<S>, train: bool| if train { g.param(t.clone()) } else { g.constant(t.clone()) };
        PromptSchedule {
            general: state.general_prompt.iter().map(|t| bind(g, t, general)).collect(),
            task: state.task_prompt.iter().map(|t| bind(g, t, task)).collect(),
        }
    }

    /// Contrastive training of the general prompt on two views per image.
    fn gke_phase(&mut self, i: usize, split: &TaskSplit, diag: &mut TaskDiagnostics) -> Result<()> {
        let bb = self.backbone;
        let sgd = Sgd { lr: self.train.lr_general_prompt };
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for epoch in 1..=self.train.gke_epochs {
            let mut shuffle = rng::stream(self.seed, Stream::Shuffle, &[i as u64, epoch as u64]);
            order.shuffle(&mut shuffle);
            let mut epoch_losses = Vec::new();
            for (step, idx) in batches(&order, self.train.batch_size).into_iter().enumerate() {
                if idx.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "malformed contrastive batch: a single image gives no negatives".into(),
                    ));
                }
                let mut views: Vec<Image> = Vec::with_capacity(2 * idx.len());
                let mut second: Vec<Image> = Vec::with_capacity(idx.len());
                for &k in idx {
                    let seed = rng::derive_seed(self.seed, &[Stream::Augment as u64, i as u64, epoch as u64, k as u64]);
                    let (a, b) = augment_pair(&split.train[k].image, &self.train.augment, seed);
                    views.push(a);
                    second.push(b);
                }
                views.extend(second);
                let local = Self::local_labels(split, idx);
                let labels: Vec<usize> = local.iter().chain(&local).copied().collect();

                let state = &mut self.bank.states[i];
                let mut g = Graph::new();
                let bound = bb.bind(&mut g, false);
                let sched = Self::bind_prompts(&mut g, state, true, false);
                let seqs = views.iter().map(|im| bb.embed_var(&mut g, &bound, im)).collect::<Result<Vec<_>>>()?;
                let out = bb.forward_with_prompts(&mut g, &bound, &seqs, &sched)?;
                let loss = gke_loss(&mut g, out.adapted, &labels, self.train.tau)?;
                let grads = g.backward(loss)?;
                ensure_no_grad(&grads, &sched.task, "the task prompt during the contrastive phase")?;
                ensure_no_grad(&grads, &bound.vars, "the backbone")?;
                let gs: Vec<Tensor<S>> = sched.general.iter().map(|&v| grad_of(&g, &grads, v)).collect();
                let mut params: Vec<&mut Tensor<S>> = state.general_prompt.iter_mut().collect();
                sgd.step(&mut params, &gs.iter().collect::<Vec<_>>())?;

                let value = g.value(loss).item().as_f64();
                epoch_losses.push(value);
                let mut rec = LossRecord::new(i, epoch, step, Phase::Gke);
                rec.l_gke = Some(value);
                self.losses.push(rec);
            }
            let m = mean(&epoch_losses);
            debug!("task {} contrastive epoch {epoch}: {m:.4}", i + 1);
            diag.gke_epoch_loss.push(m);
        }
        Ok(())
    }

    /// Alignment and cross-task steps for epochs `E_gke+1..=E_max`.
    fn joint_phase(
        &mut self,
        i: usize,
        split: &TaskSplit,
        cd: &mut DiscriminativeClassifier<S>,
        diag: &mut TaskDiagnostics,
    ) -> Result<()> {
        let bb = self.backbone;
        let tc = self.train.clone();
        let classes = split.num_classes();
        let offset = self.offsets[i];
        let mut adam_cd = Adam::new(tc.lr_discriminator);
        let mut adam_class = Adam::new(tc.lr_class_prompt);
        let mut adam_task = Adam::new(tc.lr_task_prompt);
        let mut adam_cc = Adam::new(tc.lr_classifier);
        let with_bda = tc.mode.class_prompts();
        let past: Vec<(usize, usize)> = if with_bda {
            self.bank.states[..i]
                .iter()
                .flat_map(|s| (0..s.class_prompts.len()).map(move |m| (s.task_index, m)))
                .collect()
        } else {
            Vec::new()
        };
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for epoch in tc.gke_epochs + 1..=tc.max_epochs {
            let mut shuffle = rng::stream(self.seed, Stream::Shuffle, &[i as u64, epoch as u64]);
            order.shuffle(&mut shuffle);
            for (step, idx) in batches(&order, tc.batch_size).into_iter().enumerate() {
                let b = idx.len();
                let local = Self::local_labels(split, idx);
                let global: Vec<usize> = local.iter().map(|m| offset + m).collect();
                let parts = [i as u64, epoch as u64, step as u64];
                let mut rec = LossRecord::new(i, epoch, step, if with_bda { Phase::Bda } else { Phase::Cke });

                // Real forward with a trainable task prompt; its values also
                // feed the discriminator step.
                let mut g = Graph::new();
                let bound = bb.bind(&mut g, false);
                let sched = Self::bind_prompts(&mut g, &self.bank.states[i], false, true);
                let seqs = idx
                    .iter()
                    .map(|&k| bb.embed_var(&mut g, &bound, &split.train[k].image))
                    .collect::<Result<Vec<_>>>()?;
                let real = bb.forward_with_prompts(&mut g, &bound, &seqs, &sched)?.adapted;

                if with_bda {
                    let state = &mut self.bank.states[i];
                    let mut vrng = rng::stream(self.seed, Stream::VirtualCurrent, &parts);
                    let vlabels: Vec<usize> = (0..b).map(|_| vrng.random_range(0..classes)).collect();
                    let eps: Vec<Tensor<S>> = (0..b).map(|_| standard_normal(state.class_prompts[0].mu.shape(), &mut vrng)).collect();

                    // Virtual forward: only class prompts are trainable.
                    let mut gv = Graph::new();
                    let vbound = bb.bind(&mut gv, false);
                    let vsched = Self::bind_prompts(&mut gv, state, false, false);
                    let cp_vars: Vec<(Var, Var)> = state
                        .class_prompts
                        .iter()
                        .map(|c| (gv.param(c.mu.clone()), gv.param(c.log_sigma.clone())))
                        .collect();
                    let vseqs = vlabels
                        .iter()
                        .zip(eps)
                        .map(|(&m, e)| gv.gaussian_reparam_sample(cp_vars[m].0, cp_vars[m].1, e))
                        .collect::<Result<Vec<_>>>()?;
                    let virt = bb.forward_with_prompts(&mut gv, &vbound, &vseqs, &vsched)?.adapted;

                    // (A) discriminator on detached representations.
                    let mut ga = Graph::new();
                    let real_c = ga.constant(g.value(real).clone());
                    let virt_c = ga.constant(gv.value(virt).clone());
                    let cd_vars = cd.bind(&mut ga, true);
                    let terms = bda_classifier_loss(&mut ga, real_c, &local, virt_c, &vlabels, cd_vars)?;
                    let grads = ga.backward(terms.total)?;
                    let gw = grad_of(&ga, &grads, cd_vars.weight);
                    let gb = grad_of(&ga, &grads, cd_vars.bias);
                    adam_cd.step(&mut [&mut cd.weight, &mut cd.bias], &[&gw, &gb])?;
                    rec.l_cls = Some(ga.value(terms.cls).item().as_f64());
                    rec.l_dis = Some(ga.value(terms.dis).item().as_f64());

                    // (B) class prompts against the updated, fixed discriminator.
                    let cd_fixed = cd.bind(&mut gv, false);
                    let dec = bda_deception_loss(&mut gv, virt, &vlabels, cd_fixed)?;
                    let grads = gv.backward(dec)?;
                    ensure_no_grad(&grads, &vsched.task, "the task prompt in the deception step")?;
                    ensure_no_grad(&grads, &vsched.general, "the general prompt in the deception step")?;
                    ensure_no_grad(&grads, &[cd_fixed.weight, cd_fixed.bias], "the discriminator in the deception step")?;
                    let cg: Vec<Tensor<S>> = cp_vars
                        .iter()
                        .flat_map(|&(m, s)| [grad_of(&gv, &grads, m), grad_of(&gv, &grads, s)])
                        .collect();
                    let mut params: Vec<&mut Tensor<S>> =
                        state.class_prompts.iter_mut().flat_map(|c| [&mut c.mu, &mut c.log_sigma]).collect();
                    adam_class.step(&mut params, &cg.iter().collect::<Vec<_>>())?;
                    rec.l_dec = Some(gv.value(dec).item().as_f64());
                }

                // (C) task prompt and classifier on real data plus replay.
                let virt_past = if !past.is_empty() {
                    let mut prng = rng::stream(self.seed, Stream::VirtualPast, &parts);
                    let picks: Vec<(usize, usize)> = (0..b).map(|_| past[prng.random_range(0..past.len())]).collect();
                    let mut labels = Vec::with_capacity(b);
                    let mut vseqs = Vec::with_capacity(b);
                    for (v, u) in picks {
                        let cp = &self.bank.states[v].class_prompts[u];
                        labels.push(cp.class_index_global);
                        let sample = crate::prompts::sample_virtual_embedding(cp, &mut prng);
                        vseqs.push(g.constant(sample));
                    }
                    let reps = bb.forward_with_prompts(&mut g, &bound, &vseqs, &sched)?.adapted;
                    Some((reps, labels))
                } else {
                    None
                };
                let cc_vars = self.classifier.bind(&mut g, true);
                let terms = cke_loss(
                    &mut g,
                    real,
                    &global,
                    virt_past.as_ref().map(|(r, l)| (*r, l.as_slice())),
                    cc_vars,
                    tc.lambda,
                )?;
                let grads = g.backward(terms.total)?;
                ensure_no_grad(&grads, &sched.general, "the general prompt in the cross-task step")?;
                ensure_no_grad(&grads, &bound.vars, "the backbone")?;
                let tg: Vec<Tensor<S>> = sched.task.iter().map(|&v| grad_of(&g, &grads, v)).collect();
                let state = &mut self.bank.states[i];
                let mut params: Vec<&mut Tensor<S>> = state.task_prompt.iter_mut().collect();
                adam_task.step(&mut params, &tg.iter().collect::<Vec<_>>())?;
                let gw = grad_of(&g, &grads, cc_vars.weight);
                let gb = grad_of(&g, &grads, cc_vars.bias);
                adam_cc.step(&mut [&mut self.classifier.weight, &mut self.classifier.bias], &[&gw, &gb])?;
                rec.l_rea = Some(g.value(terms.rea).item().as_f64());
                rec.l_vir = terms.vir.map(|v| g.value(v).item().as_f64());
                self.losses.push(rec);
            }
            if with_bda && tc.diagnostics {
                let a = self.measure_alignment(i, split, cd, epoch)?;
                debug!("task {} epoch {epoch}: alignment {a:?}", i + 1);
                diag.alignment.push(a);
            }
        }
        Ok(())
    }

    /// Real and virtual representations of the current task under its
    /// current prompts, compared class by class.
    pub fn measure_alignment(
        &self,
        i: usize,
        split: &TaskSplit,
        cd: &DiscriminativeClassifier<S>,
        epoch: usize,
    ) -> Result<AlignmentEpoch> {
        let bb = self.backbone;
        let state = &self.bank.states[i];
        let classes = split.num_classes();
        let images: Vec<&Image> = split.train.iter().map(|s| &s.image).collect();
        let real = query_batch(bb, state, &images)?;
        let real_labels = Self::local_labels(split, &(0..split.train.len()).collect::<Vec<_>>());

        let mut vrng = rng::stream(self.seed, Stream::Diagnostics, &[i as u64, epoch as u64]);
        let n = self.train.diagnostic_samples_per_class;
        let mut vlabels = Vec::with_capacity(n * classes);
        let mut samples = Vec::with_capacity(n * classes);
        for (m, cp) in state.class_prompts.iter().enumerate() {
            for _ in 0..n {
                samples.push(crate::prompts::sample_virtual_embedding(cp, &mut vrng));
                vlabels.push(m);
            }
        }
        let virt = forward_sequences(bb, state, &samples)?;

        let d = bb.config.dim;
        let class_mean = |reps: &Tensor<S>, labels: &[usize], m: usize| -> Vec<f64> {
            let mut acc = vec![0.0; d];
            let mut count = 0;
            for (r, &l) in labels.iter().enumerate() {
                if l == m {
                    count += 1;
                    for (a, v) in acc.iter_mut().zip(reps.row(r)) {
                        *a += v.as_f64();
                    }
                }
            }
            acc.iter().map(|a| a / count.max(1) as f64).collect()
        };
        let real_means: Vec<Vec<f64>> = (0..classes).map(|m| class_mean(&real, &real_labels, m)).collect();
        let virt_means: Vec<Vec<f64>> = (0..classes).map(|m| class_mean(&virt, &vlabels, m)).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let mean_cosine = mean(&(0..classes).map(|m| cos(&real_means[m], &virt_means[m])).collect::<Vec<_>>());

        let mut nc_hits = 0;
        let mut dec_ce = 0.0;
        let mut disc_hits = 0;
        for (r, &m) in vlabels.iter().enumerate() {
            let row: Vec<f64> = virt.row(r).iter().map(|v| v.as_f64()).collect();
            let nearest = (0..classes)
                .map(|c| (c, row.iter().zip(&real_means[c]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            nc_hits += usize::from(nearest == m);
            let logits = cd.logits(virt.row(r));
            let lf: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
            let lse = lf.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = lse + lf.iter().map(|v| (v - lse).exp()).sum::<f64>().ln();
            dec_ce += lse - lf[m];
            disc_hits += usize::from(argmax(&logits) >= classes);
        }
        for r in 0..real.rows() {
            disc_hits += usize::from(argmax(&cd.logits(real.row(r))) < classes);
        }
        let nv = vlabels.len().max(1) as f64;
        Ok(AlignmentEpoch {
            epoch,
            mean_cosine,
            virtual_nearest_centroid_accuracy: nc_hits as f64 / nv,
            discriminator_real_virtual_accuracy: disc_hits as f64 / (vlabels.len() + real.rows()).max(1) as f64,
            deception_ce: dec_ce / nv,
        })
    }

    fn build_keys(&mut self, i: usize, split: &TaskSplit) -> Result<()> {
        let bb = self.backbone;
        let images: Vec<&Image> = split.train.iter().map(|s| &s.image).collect();
        let classes = split.num_classes();
        let q = query_batch(bb, &self.bank.states[i], &images)?;
        let seed = rng::derive_seed(self.seed, &[Stream::KMeans as u64, i as u64, 0]);
        let (keys, _) = keys_from_queries(&q, i, classes, self.train.o_per_class, seed, &self.train.kmeans)?;
        let plain = plain_batch(bb, &images)?;
        let seed = rng::derive_seed(self.seed, &[Stream::KMeans as u64, i as u64, 1]);
        let (naive, _) = keys_from_queries(&plain, i, classes, self.train.o_per_class, seed, &self.train.kmeans)?;
        let state = &mut self.bank.states[i];
        state.keys = Some(keys);
        state.naive_keys = Some(naive);
        Ok(())
    }

    /// Classifier-only training on promptless features.
    fn classifier_only_phase(&mut self, i: usize, split: &TaskSplit) -> Result<()> {
        let images: Vec<&Image> = split.train.iter().map(|s| &s.image).collect();
        let reps = plain_batch(self.backbone, &images)?;
        let global: Vec<usize> = Self::local_labels(split, &(0..split.train.len()).collect::<Vec<_>>())
            .into_iter()
            .map(|m| self.offsets[i] + m)
            .collect();
        let mut adam = Adam::new(self.train.lr_classifier);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let d = self.backbone.config.dim;
        for epoch in 1..=self.train.max_epochs {
            let mut shuffle = rng::stream(self.seed, Stream::Shuffle, &[i as u64, epoch as u64]);
            order.shuffle(&mut shuffle);
            for (step, idx) in batches(&order, self.train.batch_size).into_iter().enumerate() {
                let data: Vec<S> = idx.iter().flat_map(|&k| reps.row(k).to_vec()).collect();
                let labels: Vec<usize> = idx.iter().map(|&k| global[k]).collect();
                let mut g = Graph::new();
                let x = g.constant(Tensor::new([idx.len(), d], data)?);
                let cc = self.classifier.bind(&mut g, true);
                let logits = head_logits(&mut g, x, cc)?;
                let loss = g.cross_entropy(logits, &labels)?;
                let grads = g.backward(loss)?;
                let gw = grad_of(&g, &grads, cc.weight);
                let gb = grad_of(&g, &grads, cc.bias);
                adam.step(&mut [&mut self.classifier.weight, &mut self.classifier.bias], &[&gw, &gb])?;
                let mut rec = LossRecord::new(i, epoch, step, Phase::Ftseq);
                rec.l_rea = Some(g.value(loss).item().as_f64());
                self.losses.push(rec);
            }
        }
        Ok(())
    }
}

/// Adapted representations of given sequence embeddings under `state`'s
/// prompts, `[B × D]`.
pub fn forward_sequences<S: Scalar>(
    bb: &BackboneParams<S>,
    state: &TaskState<S>,
    seqs: &[Tensor<S>],
) -> Result<Tensor<S>> {
    let d = bb.config.dim;
    let mut data = Vec::with_capacity(seqs.len() * d);
    for chunk in seqs.chunks(QUERY_CHUNK) {
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let sched = Learner::<S>::bind_prompts(&mut g, state, false, false);
        let vars: Vec<Var> = chunk.iter().map(|t| g.constant(t.clone())).collect();
        let out = bb.forward_with_prompts(&mut g, &bound, &vars, &sched)?;
        data.extend_from_slice(g.value(out.adapted).data());
    }
    Tensor::new([seqs.len(), d], data)
}

/// Trains every task in order.
pub fn run_sequence<S: Scalar>(
    backbone: &BackboneParams<S>,
    bench: &SplitBenchmark,
    train: &TrainConfig,
    prompts: &PromptConfig,
    seed: u64,
) -> Result<RunOutcome<S>> {
    Learner::new(backbone, bench, train.clone(), prompts.clone(), seed)?.run()
}

/// Number of optimizer steps per phase, keyed by phase name.
pub fn step_counts(losses: &[LossRecord]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for r in losses {
        *out.entry(r.phase.as_str()).or_insert(0) += 1;
    }
    out
}
