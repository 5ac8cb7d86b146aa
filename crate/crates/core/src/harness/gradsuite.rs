//! Finite-difference checks over every differentiable primitive and every
//! loss path, at 64-bit precision.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams, PromptSchedule};
use crate::diffcore::{finite_diff_check, GradCheckReport, Graph, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::losses::{
    bda_classifier_loss, bda_deception_loss, cke_loss, gke_loss, head_logits, orthogonality_loss, HeadVars,
};
use crate::rng::{self, Rng, Stream};

type G = Graph<f64>;
type T = Tensor<f64>;
type CheckFn = fn(&mut Rng) -> Result<GradCheckReport>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instance: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> T {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
fn project(g: &mut G, y: Var, w: &T) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn check(x: &T, op: impl Fn(&mut G, Var) -> Result<Var>) -> Result<GradCheckReport> {
    // Pass/fail is decided by the caller's tolerance.
    finite_diff_check(op, x, DEFAULT_STEP, f64::INFINITY)
}

fn unary(rng: &mut Rng, shape: &[usize], out_shape: &[usize], f: fn(&mut G, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let x = randn(rng, shape);
    let w = randn(rng, out_shape);
    check(&x, move |g, x| {
        let y = f(g, x)?;
        project(g, y, &w)
    })
}

/// `f(x, c)` or `f(c, x)` for a random constant `c`.
fn binary(
    rng: &mut Rng,
    xs: &[usize],
    cs: &[usize],
    out: &[usize],
    x_first: bool,
    f: fn(&mut G, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let x = randn(rng, xs);
    let c = randn(rng, cs);
    let w = randn(rng, out);
    check(&x, move |g, x| {
        let cv = g.constant(c.clone());
        let y = if x_first { f(g, x, cv)? } else { f(g, cv, x)? };
        project(g, y, &w)
    })
}

// Tiny architecture for the loss-through-prompt paths.
const TINY_L: usize = 4;
const TINY_D: usize = 8;

fn tiny_backbone(rng: &mut Rng) -> Result<BackboneParams<f64>> {
    use rand::Rng as _;
    let cfg = BackboneConfig { image_side: 4, channels: 1, patch: 2, dim: TINY_D, depth: 2, heads: 2, mlp_ratio: 2 };
    let mut bb = BackboneParams::init(&cfg, rng.random())?;
    bb.freeze();
    Ok(bb)
}

/// Random general prompt `[1×D]` and two task-prompt layers `[2×D]`.
fn tiny_prompts(rng: &mut Rng) -> (T, Vec<T>) {
    (randn(rng, &[1, TINY_D]).map(|v| 0.5 * v), vec![randn(rng, &[2, TINY_D]).map(|v| 0.5 * v), randn(rng, &[2, TINY_D]).map(|v| 0.5 * v)])
}

fn seqs(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| randn(rng, &[TINY_L, TINY_D])).collect()
}

fn head(rng: &mut Rng, classes: usize) -> (T, T) {
    (randn(rng, &[classes, TINY_D]).map(|v| 0.5 * v), randn(rng, &[classes]).map(|v| 0.1 * v))
}

fn bind_head(g: &mut G, h: &(T, T)) -> HeadVars {
    HeadVars { weight: g.constant(h.0.clone()), bias: g.constant(h.1.clone()) }
}

fn forward(g: &mut G, bb: &BackboneParams<f64>, inputs: &[Var], general: Var, task: &[Var]) -> Result<Var> {
    let bound = bb.bind(g, false);
    let sched = PromptSchedule { general: vec![general], task: task.to_vec() };
    Ok(bb.forward_with_prompts(g, &bound, inputs, &sched)?.adapted)
}

/// `∂L_dec/∂μ` (or `∂L_dec/∂logσ` with `wrt_sigma`) through sampling and
/// the prompted backbone.
fn deception_path(rng: &mut Rng, wrt_sigma: bool) -> Result<GradCheckReport> {
    let bb = tiny_backbone(rng)?;
    let (gp, tp) = tiny_prompts(rng);
    let mu = randn(rng, &[TINY_L, TINY_D]).map(|v| 0.5 * v);
    let ls = randn(rng, &[TINY_L, TINY_D]).map(|v| 0.3 * v - 1.0);
    let eps = seqs(rng, 3);
    let cd = head(rng, 4);
    let labels = [0, 1, 0];
    let x = if wrt_sigma { ls.clone() } else { mu.clone() };
    check(&x, move |g, x| {
        let (m, s) = if wrt_sigma { (g.constant(mu.clone()), x) } else { (x, g.constant(ls.clone())) };
        let samples = eps.iter().map(|e| g.gaussian_reparam_sample(m, s, e.clone())).collect::<Result<Vec<_>>>()?;
        let gv = g.constant(gp.clone());
        let tv: Vec<Var> = tp.iter().map(|t| g.constant(t.clone())).collect();
        let virt = forward(g, &bb, &samples, gv, &tv)?;
        let cd = bind_head(g, &cd);
        bda_deception_loss(g, virt, &labels, cd)
    })
}

/// `∂L_cke/∂t` for the first task-prompt layer, with replayed past samples.
fn cke_path(rng: &mut Rng) -> Result<GradCheckReport> {
    let bb = tiny_backbone(rng)?;
    let (gp, tp) = tiny_prompts(rng);
    let real = seqs(rng, 3);
    let past = seqs(rng, 2);
    let cc = head(rng, 5);
    let x = tp[0].clone();
    let rest = tp[1].clone();
    check(&x, move |g, x| {
        let gv = g.constant(gp.clone());
        let t1 = g.constant(rest.clone());
        let rv: Vec<Var> = real.iter().map(|s| g.constant(s.clone())).collect();
        let pv: Vec<Var> = past.iter().map(|s| g.constant(s.clone())).collect();
        let real_reps = forward(g, &bb, &rv, gv, &[x, t1])?;
        let past_reps = forward(g, &bb, &pv, gv, &[x, t1])?;
        let cc = bind_head(g, &cc);
        Ok(cke_loss(g, real_reps, &[2, 3, 4], Some((past_reps, &[0, 1])), cc, 0.1)?.total)
    })
}

/// `∂L_gke/∂g` over two views of two images.
fn gke_path(rng: &mut Rng) -> Result<GradCheckReport> {
    let bb = tiny_backbone(rng)?;
    let (gp, tp) = tiny_prompts(rng);
    let views = seqs(rng, 4);
    check(&gp, move |g, x| {
        let tv: Vec<Var> = tp.iter().map(|t| g.constant(t.clone())).collect();
        let vv: Vec<Var> = views.iter().map(|s| g.constant(s.clone())).collect();
        let reps = forward(g, &bb, &vv, x, &tv)?;
        gke_loss(g, reps, &[0, 1, 0, 1], 0.5)
    })
}

/// `∂L_bda/∂C_d` for the discriminator weight.
fn bda_classifier_path(rng: &mut Rng) -> Result<GradCheckReport> {
    let real = randn(rng, &[3, TINY_D]);
    let virt = randn(rng, &[3, TINY_D]);
    let (w, b) = head(rng, 4);
    check(&w, move |g, x| {
        let r = g.constant(real.clone());
        let v = g.constant(virt.clone());
        let bias = g.constant(b.clone());
        Ok(bda_classifier_loss(g, r, &[0, 1, 1], v, &[1, 0, 0], HeadVars { weight: x, bias })?.total)
    })
}

fn checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("matmul/left", |r| binary(r, &[3, 4], &[4, 5], &[3, 5], true, |g, a, b| g.matmul(a, b))),
        ("matmul/right", |r| binary(r, &[4, 5], &[3, 4], &[3, 5], false, |g, a, b| g.matmul(a, b))),
        ("matmul_t/left", |r| binary(r, &[3, 4], &[5, 4], &[3, 5], true, |g, a, b| g.matmul_t(a, b))),
        ("matmul_t/right", |r| binary(r, &[5, 4], &[3, 4], &[3, 5], false, |g, a, b| g.matmul_t(a, b))),
        ("transpose", |r| unary(r, &[3, 4], &[4, 3], |g, x| g.transpose(x))),
        ("add", |r| binary(r, &[3, 4], &[3, 4], &[3, 4], true, |g, a, b| g.add(a, b))),
        ("sub/left", |r| binary(r, &[3, 4], &[3, 4], &[3, 4], true, |g, a, b| g.sub(a, b))),
        ("sub/right", |r| binary(r, &[3, 4], &[3, 4], &[3, 4], false, |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(r, &[3, 4], &[3, 4], &[3, 4], true, |g, a, b| g.mul(a, b))),
        ("mul/self", |r| unary(r, &[3, 4], &[3, 4], |g, x| g.mul(x, x))),
        ("add_row/matrix", |r| binary(r, &[3, 4], &[4], &[3, 4], true, |g, a, b| g.add_row(a, b))),
        ("add_row/row", |r| binary(r, &[4], &[3, 4], &[3, 4], false, |g, a, b| g.add_row(a, b))),
        ("mul_row/matrix", |r| binary(r, &[3, 4], &[4], &[3, 4], true, |g, a, b| g.mul_row(a, b))),
        ("mul_row/row", |r| binary(r, &[4], &[3, 4], &[3, 4], false, |g, a, b| g.mul_row(a, b))),
        ("scale", |r| unary(r, &[3, 4], &[3, 4], |g, x| Ok(g.scale(x, -1.7)))),
        ("exp", |r| unary(r, &[3, 4], &[3, 4], |g, x| Ok(g.exp(x)))),
        ("gelu", |r| unary(r, &[3, 4], &[3, 4], |g, x| Ok(g.gelu(x)))),
        ("softmax_rows", |r| unary(r, &[3, 5], &[3, 5], |g, x| Ok(g.softmax_rows(x)))),
        ("log_softmax_rows", |r| unary(r, &[3, 5], &[3, 5], |g, x| Ok(g.log_softmax_rows(x)))),
        ("layer_norm_rows", |r| unary(r, &[3, 6], &[3, 6], |g, x| Ok(g.layer_norm_rows(x)))),
        ("l2_normalize_rows", |r| unary(r, &[3, 5], &[3, 5], |g, x| g.l2_normalize_rows(x))),
        ("concat_rows", |r| binary(r, &[2, 4], &[3, 4], &[5, 4], true, |g, a, b| g.concat_rows(&[b, a, b]).and_then(|y| g.slice_rows(y, 0, 5)))),
        ("concat_cols", |r| binary(r, &[3, 2], &[3, 4], &[3, 6], false, |g, a, b| g.concat_cols(&[a, b]))),
        ("slice_block", |r| unary(r, &[4, 5], &[2, 3], |g, x| g.slice_block(x, 1, 2, 2, 3))),
        ("slice_rows", |r| unary(r, &[4, 5], &[2, 5], |g, x| g.slice_rows(x, 1, 2))),
        ("reshape", |r| unary(r, &[3, 4], &[2, 6], |g, x| g.reshape(x, &[2, 6]))),
        ("sum", |r| unary(r, &[3, 4], &[1], |g, x| Ok(g.sum(x)))),
        ("mean", |r| unary(r, &[3, 4], &[1], |g, x| Ok(g.mean(x)))),
        ("pick", |r| unary(r, &[3, 4], &[1], |g, x| g.pick(x, &[(0, 0.5), (5, -2.0), (5, 1.0), (11, 3.0)]))),
        ("cross_entropy", |r| unary(r, &[3, 5], &[1], |g, x| g.cross_entropy(x, &[4, 0, 2]))),
        ("mean_squared", |r| binary(r, &[3, 4], &[3, 4], &[1], true, |g, a, b| g.mean_squared(a, b))),
        ("cosine_similarity", |r| binary(r, &[6], &[6], &[1], true, |g, a, b| g.cosine_similarity(a, b))),
        ("reparam/mu", |r| reparam(r, false)),
        ("reparam/log_sigma", |r| reparam(r, true)),
        ("loss/head_logits", |r| unary(r, &[3, 4], &[3, 2], |g, x| {
            let w = g.constant(Tensor::from_f64([2, 4], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, -0.6])?);
            let b = g.constant(Tensor::from_f64([2], &[0.05, -0.1])?);
            head_logits(g, x, HeadVars { weight: w, bias: b })
        })),
        ("loss/orthogonality", |r| unary(r, &[3, 5], &[1], orthogonality_loss)),
        ("loss/bda_classifier", bda_classifier_path),
        ("loss/deception_mu", |r| deception_path(r, false)),
        ("loss/deception_log_sigma", |r| deception_path(r, true)),
        ("loss/cke_task_prompt", cke_path),
        ("loss/gke_general_prompt", gke_path),
    ]
}

fn reparam(rng: &mut Rng, wrt_sigma: bool) -> Result<GradCheckReport> {
    let other = randn(rng, &[3, 4]).map(|v| 0.5 * v);
    let eps = randn(rng, &[3, 4]);
    let w = randn(rng, &[3, 4]);
    let x = randn(rng, &[3, 4]).map(|v| 0.5 * v);
    check(&x, move |g, x| {
        let o = g.constant(other.clone());
        let y = if wrt_sigma { g.gaussian_reparam_sample(o, x, eps.clone())? } else { g.gaussian_reparam_sample(x, o, eps.clone())? };
        project(g, y, &w)
    })
}

pub fn check_names() -> Vec<&'static str> {
    checks().into_iter().map(|(n, _)| n).collect()
}

/// Runs every check on `instances` random inputs each.
pub fn run_gradcheck_suite(seed: u64, instances: usize, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for (k, (name, f)) in checks().into_iter().enumerate() {
        for instance in 0..instances {
            let mut rng = rng::stream(seed, Stream::Diagnostics, &[k as u64, instance as u64]);
            let r = f(&mut rng)?;
            outcomes.push(CheckOutcome { name: name.to_string(), instance, max_error: r.max_error, passed: r.max_error <= tolerance });
        }
    }
    Ok(SuiteReport { outcomes, tolerance, seconds: start.elapsed().as_secs_f64() })
}
