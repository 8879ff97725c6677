//! Adam optimizer with bias correction and optional decoupled weight decay.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with the standard moment coefficients (`beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`) and bias correction. Weight decay, when nonzero, is decoupled
/// (applied directly to the parameter, not through the moments).
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_weight_decay(lr, 0.0)
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. `params` and `grads` must stay in the same order
    /// across calls; a `None` gradient leaves that parameter (and its moments)
    /// untouched except for weight decay.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "Adam::step",
                expected: format!("{} gradients", params.len()),
                got: format!("{}", grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "Adam::step: {} parameters but optimizer state has {}",
                    params.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().map(|p| &mut **p).zip(grads).enumerate() {
            if self.weight_decay != 0.0 {
                let wd = self.lr * self.weight_decay;
                for x in p.data_mut() {
                    *x -= wd * *x;
                }
            }
            let Some(g) = g else { continue };
            if g.dims() != p.dims() {
                return Err(Error::ShapeMismatch {
                    op: "Adam::step",
                    expected: format!("{:?}", p.dims()),
                    got: format!("{:?}", g.dims()),
                });
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                m.data_mut()[i] = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                v.data_mut()[i] = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
