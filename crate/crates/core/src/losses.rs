//! Training objectives: the adversarial alignment pair, the cross-task
//! classification pair, the supervised contrastive loss, and loss logging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Linear head `x·Wᵀ + b`. Used both as the `2|Y_i|`-way discriminator and
/// as the growing classifier over every seen class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<S> {
    /// `[classes × D]`, one row per class.
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// `2|Y_i|` outputs: real class `m` at `m`, virtual class `m` at `m + |Y_i|`.
pub type DiscriminativeClassifier<S> = LinearHead<S>;
/// One output per seen class, indexed globally.
pub type ClassificationClassifier<S> = LinearHead<S>;

/// Bound weight and bias of a [`LinearHead`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl<S: Scalar> LinearHead<S> {
    pub fn init(classes: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self { weight: Tensor::randn([classes, dim], std, rng), bias: Tensor::zeros([classes]) }
    }

    pub fn empty(dim: usize) -> Self {
        Self { weight: Tensor::zeros([0, dim]), bias: Tensor::zeros([0]) }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Appends `extra` freshly initialized rows; existing rows are untouched.
    pub fn grow(&mut self, extra: usize, std: f64, rng: &mut Rng) {
        let d = self.dim();
        let n = self.classes() + extra;
        let mut w = std::mem::replace(&mut self.weight, Tensor::zeros([0, d])).into_data();
        w.extend(Tensor::<S>::randn([extra, d], std, rng).into_data());
        self.weight = Tensor::new([n, d], w).expect("grown weight");
        let mut b = std::mem::replace(&mut self.bias, Tensor::zeros([0])).into_data();
        b.resize(n, S::zero());
        self.bias = Tensor::new([n], b).expect("grown bias");
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> HeadVars {
        if trainable {
            HeadVars { weight: g.param(self.weight.clone()), bias: g.param(self.bias.clone()) }
        } else {
            HeadVars { weight: g.constant(self.weight.clone()), bias: g.constant(self.bias.clone()) }
        }
    }

    /// Logits for one representation.
    pub fn logits(&self, rep: &[S]) -> Vec<S> {
        (0..self.classes())
            .map(|k| crate::diffcore::dot(self.weight.row(k), rep) + self.bias.data()[k])
            .collect()
    }
}

/// `reps · Wᵀ + b` in the graph.
pub fn head_logits<S: Scalar>(g: &mut Graph<S>, reps: Var, head: HeadVars) -> Result<Var> {
    let z = g.matmul_t(reps, head.weight)?;
    g.add_row(z, head.bias)
}

/// Components of the discriminator objective.
#[derive(Debug, Clone, Copy)]
pub struct BdaClassifierTerms {
    /// Real-as-`m` plus virtual-as-`m+|Y_i|` cross-entropies.
    pub cls: Var,
    /// Mean-squared distance of the row Gram matrix from the identity.
    pub dis: Var,
    pub total: Var,
}

/// `MSE(W·Wᵀ, I)` over the `2|Y_i| × 2|Y_i|` row Gram matrix.
pub fn orthogonality_loss<S: Scalar>(g: &mut Graph<S>, weight: Var) -> Result<Var> {
    let gram = g.matmul_t(weight, weight)?;
    let k = g.value(weight).rows();
    let mut eye = Tensor::zeros([k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = S::one();
    }
    let eye = g.constant(eye);
    g.mean_squared(gram, eye)
}

fn check_labels(labels: &[usize], bound: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= bound) {
        Some(l) => Err(Error::InvalidArgument(format!("{what} label {l} out of range for {bound} classes"))),
        None => Ok(()),
    }
}

/// Discriminator objective: real representations as their class, virtual
/// ones as the shifted class, plus row orthogonality of `W`. The caller
/// passes `virt_reps` detached so only the discriminator receives gradients.
pub fn bda_classifier_loss<S: Scalar>(
    g: &mut Graph<S>,
    real_reps: Var,
    real_labels: &[usize],
    virt_reps: Var,
    virt_labels: &[usize],
    cd: HeadVars,
) -> Result<BdaClassifierTerms> {
    let outputs = g.value(cd.weight).rows();
    if !outputs.is_multiple_of(2) || outputs == 0 {
        return Err(Error::Shape(format!("discriminator with {outputs} outputs; expected 2·|Y_i|")));
    }
    let classes = outputs / 2;
    check_labels(real_labels, classes, "real")?;
    check_labels(virt_labels, classes, "virtual")?;
    let real_logits = head_logits(g, real_reps, cd)?;
    let ce_real = g.cross_entropy(real_logits, real_labels)?;
    let virt_logits = head_logits(g, virt_reps, cd)?;
    let shifted: Vec<usize> = virt_labels.iter().map(|&m| m + classes).collect();
    let ce_virt = g.cross_entropy(virt_logits, &shifted)?;
    let cls = g.add(ce_real, ce_virt)?;
    let dis = orthogonality_loss(g, cd.weight)?;
    let total = g.add(cls, dis)?;
    Ok(BdaClassifierTerms { cls, dis, total })
}

/// Deception objective: virtual representations classified as their true
/// class by a fixed discriminator. `cd` should be bound as constants.
pub fn bda_deception_loss<S: Scalar>(
    g: &mut Graph<S>,
    virt_reps: Var,
    virt_labels: &[usize],
    cd: HeadVars,
) -> Result<Var> {
    let classes = g.value(cd.weight).rows() / 2;
    check_labels(virt_labels, classes, "virtual")?;
    let logits = head_logits(g, virt_reps, cd)?;
    g.cross_entropy(logits, virt_labels)
}

#[derive(Debug, Clone, Copy)]
pub struct CkeTerms {
    pub rea: Var,
    /// Absent for the first task.
    pub vir: Option<Var>,
    pub total: Var,
}

/// `L_rea + λ·L_vir` over the classifier of all seen classes, with global
/// labels. `virt_past` is `None` when no past classes exist.
pub fn cke_loss<S: Scalar>(
    g: &mut Graph<S>,
    real_reps: Var,
    real_labels: &[usize],
    virt_past: Option<(Var, &[usize])>,
    cc: HeadVars,
    lambda: f64,
) -> Result<CkeTerms> {
    let seen = g.value(cc.weight).rows();
    check_labels(real_labels, seen, "real")?;
    let real_logits = head_logits(g, real_reps, cc)?;
    let rea = g.cross_entropy(real_logits, real_labels)?;
    let Some((virt, labels)) = virt_past else {
        return Ok(CkeTerms { rea, vir: None, total: rea });
    };
    check_labels(labels, seen, "virtual")?;
    let virt_logits = head_logits(g, virt, cc)?;
    let vir = g.cross_entropy(virt_logits, labels)?;
    let weighted = g.scale(vir, lambda);
    let total = g.add(rea, weighted)?;
    Ok(CkeTerms { rea, vir: Some(vir), total })
}

/// Supervised contrastive loss over `2N` representations with cosine
/// similarity and temperature `tau`; every anchor needs at least one other
/// sample with its label.
pub fn gke_loss<S: Scalar>(g: &mut Graph<S>, reps: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = g.value(reps).rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} representations", labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut picks = Vec::new();
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if positives.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "anchor {a} (label {}) has no positive in the batch",
                labels[a]
            )));
        }
        let w = -1.0 / (positives.len() as f64 * n as f64);
        picks.extend(positives.into_iter().map(|p| (a * n + p, w)));
    }
    let z = g.l2_normalize_rows(reps)?;
    let sim = g.matmul_t(z, z)?;
    let sim = g.scale(sim, 1.0 / tau);
    let mut mask = Tensor::zeros([n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = S::neg_infinity();
    }
    let mask = g.constant(mask);
    let masked = g.add(sim, mask)?;
    let log_prob = g.log_softmax_rows(masked);
    g.pick(log_prob, &picks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Gke,
    Bda,
    Cke,
    Ftseq,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Gke => "gke",
            Phase::Bda => "bda",
            Phase::Cke => "cke",
            Phase::Ftseq => "ftseq",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gke" => Phase::Gke,
            "bda" => Phase::Bda,
            "cke" => Phase::Cke,
            "ftseq" => Phase::Ftseq,
            _ => return None,
        })
    }
}

/// One per-step loss log row. Components that do not apply to the step are
/// absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub l_cls: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_dec: Option<f64>,
    pub l_rea: Option<f64>,
    pub l_vir: Option<f64>,
    pub l_gke: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "task,epoch,step,phase,l_cls,l_dis,l_dec,l_rea,l_vir,l_gke";

/// The three objectives of one step and their sum, for logging only.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TotalLossReport {
    pub bda: Option<f64>,
    pub cke: Option<f64>,
    pub gke: Option<f64>,
    pub sum: f64,
}

pub fn total_loss_report(bda: Option<f64>, cke: Option<f64>, gke: Option<f64>) -> TotalLossReport {
    let sum = bda.unwrap_or(0.0) + cke.unwrap_or(0.0) + gke.unwrap_or(0.0);
    TotalLossReport { bda, cke, gke, sum }
}

fn opt_sum(parts: &[Option<f64>]) -> Option<f64> {
    parts.iter().any(Option::is_some).then(|| parts.iter().flatten().sum())
}

impl LossRecord {
    pub fn new(task: usize, epoch: usize, step: usize, phase: Phase) -> Self {
        Self { task, epoch, step, phase, l_cls: None, l_dis: None, l_dec: None, l_rea: None, l_vir: None, l_gke: None }
    }

    /// `L_cls + L_dis + L_dec`, the cross-task term with `lambda`, and the
    /// contrastive term.
    pub fn report(&self, lambda: f64) -> TotalLossReport {
        let bda = opt_sum(&[self.l_cls, self.l_dis, self.l_dec]);
        let cke = self.l_rea.map(|r| r + lambda * self.l_vir.unwrap_or(0.0));
        total_loss_report(bda, cke, self.l_gke)
    }

    pub fn to_csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.epoch,
            self.step,
            self.phase.as_str(),
            f(self.l_cls),
            f(self.l_dis),
            f(self.l_dec),
            f(self.l_rea),
            f(self.l_vir),
            f(self.l_gke)
        );
        s
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 10 {
            return Err(Error::Data(format!("loss row has {} columns: {line}", cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Data(format!("{s}: {e}")));
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| Error::Data(format!("{s}: {e}")))
            }
        };
        Ok(Self {
            task: int(cols[0])?,
            epoch: int(cols[1])?,
            step: int(cols[2])?,
            phase: Phase::parse(cols[3]).ok_or_else(|| Error::Data(format!("unknown phase {}", cols[3])))?,
            l_cls: opt(cols[4])?,
            l_dis: opt(cols[5])?,
            l_dec: opt(cols[6])?,
            l_rea: opt(cols[7])?,
            l_vir: opt(cols[8])?,
            l_gke: opt(cols[9])?,
        })
    }
}

pub fn losses_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn losses_from_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Data("loss log header mismatch".into()));
    }
    lines.filter(|l| !l.is_empty()).map(LossRecord::from_csv_row).collect()
}
