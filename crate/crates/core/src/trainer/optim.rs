//! Adaptive-moment and plain gradient-descent updates.

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates `params[i]` with `grads[i]`. The parameter list must keep the
    /// same order and shapes across calls; it may grow at the end.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} params vs {} grads", params.len(), grads.len())));
        }
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let bc1 = S::of(1.0 - self.beta1.powi(self.step));
        let bc2 = S::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if i >= self.moments.len() {
                self.moments.push((vec![S::zero(); p.len()], vec![S::zero(); p.len()]));
            }
            let (m, v) = &mut self.moments[i];
            if m.len() != p.len() {
                // Parameter grew (classifier rows); keep existing moments.
                m.resize(p.len(), S::zero());
                v.resize(p.len(), S::zero());
            }
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent without momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<S: Scalar>(&self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        let lr = S::of(self.lr);
        for (p, g) in params.iter_mut().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("{:?} vs grad {:?}", p.shape(), g.shape())));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}
