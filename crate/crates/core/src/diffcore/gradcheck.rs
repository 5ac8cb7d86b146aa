use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of comparing reverse-mode and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (f64, f64) {
        if self.analytic.is_empty() {
            return (0.0, 0.0);
        }
        (self.analytic[self.worst_index], self.numeric[self.worst_index])
    }
}

/// Checks the gradient of a scalar-valued `op` at `input`.
///
/// `op` receives a fresh graph and the input as a trainable leaf and must
/// return a single-element output. The comparison is relative for
/// gradients larger than one and absolute below.
pub fn finite_diff_check<F>(op: F, input: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = op(&mut g, v)?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(Error::Shape(format!("gradcheck op returned {:?}", val.shape())));
        }
        Ok(val.item())
    };

    let mut g = Graph::new();
    let x = g.param(input.clone());
    let out = op(&mut g, x)?;
    let grads = g.backward(out)?;
    let analytic = match grads.get(x) {
        Some(t) => t.to_f64_vec(),
        None => vec![0.0; input.len()],
    };

    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut max_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if !(err <= max_error) {
            max_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { passed: max_error <= tol, max_error, worst_index, analytic, numeric })
}
