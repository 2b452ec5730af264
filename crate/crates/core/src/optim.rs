//! Adam with bias correction.

use alloc::vec::Vec;

use thiserror::Error;

use crate::autograd::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("parameter {index}: shape {param:?} does not match {other:?}")]
    ShapeMismatch { index: usize, param: Vec<usize>, other: Vec<usize> },
    #[error("expected {expected} parameters, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-6;

    /// Zeroed moments shaped like `params`, with the BERT defaults.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1: Self::BETA1, beta2: Self::BETA2, eps: Self::EPS, step: 0, v: m.clone(), m }
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// including their moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::BadLearningRate(lr));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::CountMismatch { expected: self.m.len(), actual: params.len().min(grads.len()) });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let mismatch = |other: &[usize]| OptimError::ShapeMismatch { index: i, param: p.shape().to_vec(), other: other.to_vec() };
            if p.shape() != self.m[i].shape() {
                return Err(mismatch(self.m[i].shape()));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(mismatch(g.shape()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
