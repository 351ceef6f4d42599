//! Toy next-token training loop, just capable enough to give the split
//! experiments a model whose predictions are worth degrading.

use super::{ModelError, TransformerModel};
use crate::optim::{OptimError, Optimizer, OptimizerKind};
use crate::tensor::GradGraph;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty or has no sequence of length >= 2")]
    EmptyCorpus,
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: OptimError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    /// Decoupled weight decay on projection matrices (AdamW style). Keeping
    /// the residual stream from inflating matters here: the reconstruction
    /// attack inverts block outputs, and an unregularized run on this corpus
    /// grows them until the embedding-scale signal drowns.
    pub weight_decay: f32,
    /// Layer-wise learning-rate decay: block `l` of `L` trains at
    /// `lr * layer_lr_decay^(L-1-l)`, so lower blocks move less
    /// (discriminative layer rates). 1.0 disables the schedule.
    pub layer_lr_decay: f32,
    /// Activation regularization: adds
    /// `activation_reg * mean over blocks of (block output squared norm / len)`
    /// to the loss. Production transformers grow the residual stream by a
    /// small factor per block; unregularized training on this deterministic
    /// corpus inflates it by 30x+, which buries the embedding-scale signal
    /// the reconstruction experiments study. A small penalty keeps hidden
    /// magnitudes at production-like scale. 0.0 disables.
    pub activation_reg: f32,
    pub seed: u64,
}

/// Defaults match the reference training run: 10 epochs at lr 3e-3 over the
/// 1024-sequence pattern corpus reach ~0.95 held-out next-token accuracy
/// while the regularizers keep the bottom stack reconstruction-friendly.
impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            lr: 3e-3,
            weight_decay: 0.1,
            layer_lr_decay: 1.0,
            activation_reg: 1.5e-2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch, in nats.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains `model` in place on next-token prediction over `corpus` with Adam.
/// Sequence order is reshuffled every epoch from a ChaCha stream seeded by
/// `opts.seed`, so the whole run is deterministic.
pub fn train_toy(
    model: &mut TransformerModel,
    corpus: &[Vec<u32>],
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let sizes: Vec<usize> = model.params.buffers().iter().map(|b| b.len()).collect();
    let n_layers = model.config.n_layers;
    let lr_scales: Vec<f32> = model
        .params
        .buffer_blocks()
        .iter()
        .map(|block| match block {
            Some(l) => opts.layer_lr_decay.powi((n_layers - 1 - l) as i32),
            None => 1.0,
        })
        .collect();
    let decay_mask = model.params.decay_mask();
    // Decoupled decay shrinks each matrix by its own effective rate.
    let shrinks: Vec<f32> = lr_scales
        .iter()
        .zip(&decay_mask)
        .map(|(&scale, &decays)| {
            if decays {
                1.0 - opts.lr * scale * opts.weight_decay
            } else {
                1.0
            }
        })
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::default_adam(), opts.lr, &sizes);
    opt.set_lr_scales(lr_scales);
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut steps = 0usize;

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for &si in &order {
            let seq = usable[si];
            let inputs = &seq[..seq.len() - 1];
            let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();

            let mut g = GradGraph::new();
            let (leaves, logits, block_outputs) = model.build_train_forward(&mut g, inputs)?;
            let ce = g.cross_entropy(logits, &targets).map_err(ModelError::from)?;
            epoch_loss += g.data(ce)[0] as f64;
            let mut loss = ce;
            if opts.activation_reg > 0.0 {
                let scale = opts.activation_reg / (inputs.len() * block_outputs.len()) as f32;
                for &h in &block_outputs {
                    let sq = g.squared_l2(h).map_err(ModelError::from)?;
                    let pen = g.mul_scalar(sq, scale).map_err(ModelError::from)?;
                    loss = g.add(loss, pen).map_err(ModelError::from)?;
                }
            }
            g.backward(loss).map_err(ModelError::from)?;

            let grads: Vec<Option<&[f32]>> = leaves.iter().map(|&id| g.grad(id)).collect();
            let mut bufs = model.params.buffers_mut();
            opt.step(&mut bufs, &grads)
                .map_err(|source| TrainError::Diverged { step: steps, source })?;
            for (buf, &shrink) in bufs.iter_mut().zip(&shrinks) {
                if shrink != 1.0 {
                    for v in buf.iter_mut() {
                        *v *= shrink;
                    }
                }
            }
            steps += 1;
        }
        let mean = epoch_loss / order.len() as f64;
        epoch_losses.push(mean);
        debug!("epoch {epoch}: mean loss {mean:.4}");
    }
    info!(
        "trained {steps} steps over {} epochs, final loss {:.4}",
        opts.epochs,
        epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainReport {
        epoch_losses,
        steps,
    })
}
