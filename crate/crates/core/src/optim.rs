//! First-order optimizers used by both the toy training loop and the
//! reconstruction attack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter buffer {index} has {params} values but gradient has {grads}")]
    SizeMismatch {
        index: usize,
        params: usize,
        grads: usize,
    },
    #[error("update produced a non-finite parameter in buffer {index}")]
    Diverged { index: usize },
}

/// Optimizer choice, serialisable so experiment configs can select one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
    Sgd,
}

impl OptimizerKind {
    pub fn default_adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam/SGD over a fixed set of parameter buffers. Moment estimates are kept
/// per buffer, indexed by position, so callers must pass buffers in the same
/// order every step.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    /// Per-buffer multipliers on `lr`; empty means 1.0 everywhere.
    lr_scales: Vec<f32>,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, buffer_sizes: &[usize]) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam { .. } => (
                buffer_sizes.iter().map(|&s| vec![0.0; s]).collect(),
                buffer_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            ),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            lr,
            lr_scales: Vec::new(),
            t: 0,
            m,
            v,
        }
    }

    /// Scales the learning rate per buffer (e.g. layer-wise rates). The
    /// vector aligns with the buffer order passed to [`Optimizer::step`];
    /// missing entries default to 1.0.
    pub fn set_lr_scales(&mut self, scales: Vec<f32>) {
        self.lr_scales = scales;
    }

    fn lr_for(&self, index: usize) -> f32 {
        self.lr * self.lr_scales.get(index).copied().unwrap_or(1.0)
    }

    /// Applies one update step. `grads[i]` must align with `params[i]`;
    /// a gradient of `None` leaves that buffer untouched (e.g. a parameter
    /// that did not participate in the step's graph).
    pub fn step(
        &mut self,
        params: &mut [&mut Vec<f32>],
        grads: &[Option<&[f32]>],
    ) -> Result<(), OptimError> {
        self.t += 1;
        for (index, (buf, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.len() != buf.len() {
                return Err(OptimError::SizeMismatch {
                    index,
                    params: buf.len(),
                    grads: grad.len(),
                });
            }
            let lr = self.lr_for(index);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in buf.iter_mut().zip(*grad) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = &mut self.m[index];
                    let v = &mut self.v[index];
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    for i in 0..buf.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        buf[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if buf.iter().any(|p| !p.is_finite()) {
                return Err(OptimError::Diverged { index });
            }
        }
        Ok(())
    }
}
