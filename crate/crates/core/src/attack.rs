//! White-box reconstruction of input tokens from captured hidden embeddings.
//!
//! The attacker (an honest-but-curious provider) holds a hidden-embedding
//! frame and the bottom half of the model, and wants the tokens that
//! produced it. The primary attack optimises free word embeddings `h_w`
//! so the bottom stack reproduces the captured embeddings:
//!
//! ```text
//! minimise  || Bottom(h_w + positional) - captured ||^2   over h_w
//! ```
//!
//! starting from the filler-token embedding, stopping when the mean
//! per-position cosine similarity between prediction and capture reaches a
//! threshold (or a step budget runs out). Tokens are then recovered
//! per position as the vocabulary entry whose embedding row has the highest
//! cosine similarity to the reconstructed row.
//!
//! A baseline variant ([`direct_token_baseline`]) instead optimises a
//! relaxed token distribution `v` per position and forms the embedding as
//! `softmax(v) . W`. It searches a `vocab_size`-dimensional simplex per
//! position for what is geometrically an `embed_dim`-dimensional quantity,
//! which is why it trails the two-step attack when the vocabulary is much
//! larger than the embedding width.

use crate::model::{BottomView, ModelError};
use crate::optim::{OptimError, Optimizer, OptimizerKind};
use crate::protocol::HiddenFrame;
use crate::tensor::{argmax, cosine_f64, GradGraph, Tensor, TensorError};
use crate::tokenizer::FILLER;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("target shape {got:?} does not match [len, {embed_dim}]")]
    BadTarget { got: Vec<usize>, embed_dim: usize },
    #[error("target length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("frame was produced at split {frame} but the attacker holds split {bottom}")]
    SplitMismatch { frame: u16, bottom: usize },
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("frame payload: {0}")]
    BadFrame(String),
    #[error("graph failure at step {step}: {source}")]
    Graph {
        step: u32,
        #[source]
        source: TensorError,
    },
    #[error("optimizer failure at step {step}: {source}")]
    Optim {
        step: u32,
        #[source]
        source: OptimError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How to initialise the free embeddings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Every position starts at the embedding of `filler_token`.
    Filler,
    /// Elementwise N(0, std^2) from the attack seed.
    RandomNormal { std: f32 },
    /// Caller-supplied flat `[len * embed_dim]` start point (testing tool).
    Provided { values: Vec<f32> },
}

/// How predicted and captured embeddings are compared for the stop rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CosineAggregation {
    /// Mean of per-position cosine similarities (the default).
    MeanPerPosition,
    /// Single cosine over the flattened tensors.
    Flattened,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AttackConfig {
    pub max_steps: u32,
    pub cosine_stop: f32,
    pub step_size: f32,
    pub optimizer: OptimizerKind,
    pub init: InitStrategy,
    pub filler_token: u32,
    pub aggregation: CosineAggregation,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_steps: 1000,
            cosine_stop: 0.98,
            step_size: 0.05,
            optimizer: OptimizerKind::default_adam(),
            init: InitStrategy::Filler,
            filler_token: FILLER,
            aggregation: CosineAggregation::MeanPerPosition,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.cosine_stop > 0.0 && self.cosine_stop <= 1.0) {
            return Err(AttackError::BadConfig(format!(
                "cosine_stop must be in (0, 1], got {}",
                self.cosine_stop
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::BadConfig(format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Output of the embedding-space optimisation.
#[derive(Debug, Clone)]
pub struct ReconstructionOutcome {
    /// Reconstructed word embeddings `[len, embed_dim]`.
    pub embeddings: Tensor,
    /// Update steps actually performed (0 if the start point already met
    /// the stop rule).
    pub steps: u32,
    /// Aggregated cosine similarity at the stopping point.
    pub final_cosine: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full attack output: reconstruction plus recovered tokens.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub embeddings: Tensor,
    pub recovered: Vec<u32>,
    pub steps: u32,
    pub final_cosine: f64,
    pub wall_ms: u64,
}

fn aggregate_cosine(pred: &[f32], target: &[f32], len: usize, d: usize, agg: CosineAggregation) -> f64 {
    match agg {
        CosineAggregation::Flattened => cosine_f64(pred, target),
        CosineAggregation::MeanPerPosition => {
            let mut sum = 0.0f64;
            for r in 0..len {
                sum += cosine_f64(&pred[r * d..(r + 1) * d], &target[r * d..(r + 1) * d]);
            }
            sum / len as f64
        }
    }
}

fn squared_distance_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            diff * diff
        })
        .sum()
}

fn validate_target(bottom: &BottomView<'_>, target: &Tensor) -> Result<(usize, usize), AttackError> {
    let cfg = bottom.config();
    if target.shape.len() != 2 || target.shape[1] != cfg.embed_dim || target.shape[0] == 0 {
        return Err(AttackError::BadTarget {
            got: target.shape.clone(),
            embed_dim: cfg.embed_dim,
        });
    }
    let len = target.shape[0];
    if len > cfg.max_seq_len {
        return Err(AttackError::TooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    Ok((len, cfg.embed_dim))
}

fn initial_embeddings(
    bottom: &BottomView<'_>,
    cfg: &AttackConfig,
    len: usize,
    d: usize,
) -> Result<Vec<f32>, AttackError> {
    match &cfg.init {
        InitStrategy::Filler => {
            let vocab = bottom.config().vocab_size;
            let filler = cfg.filler_token as usize;
            if filler >= vocab {
                return Err(AttackError::BadConfig(format!(
                    "filler token {filler} out of range for vocabulary of size {vocab}"
                )));
            }
            let w = bottom.word_embeddings();
            let row = &w[filler * d..(filler + 1) * d];
            let mut out = Vec::with_capacity(len * d);
            for _ in 0..len {
                out.extend_from_slice(row);
            }
            Ok(out)
        }
        InitStrategy::RandomNormal { std } => {
            if !(std.is_finite() && *std >= 0.0) {
                return Err(AttackError::BadConfig(format!("invalid init std {std}")));
            }
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let normal = Normal::new(0.0f64, *std as f64)
                .map_err(|e| AttackError::BadConfig(e.to_string()))?;
            Ok((0..len * d).map(|_| normal.sample(&mut rng) as f32).collect())
        }
        InitStrategy::Provided { values } => {
            if values.len() != len * d {
                return Err(AttackError::BadConfig(format!(
                    "provided init has {} values, expected {}",
                    values.len(),
                    len * d
                )));
            }
            Ok(values.clone())
        }
    }
}

/// Gradient-descent reconstruction of the word embeddings behind `target`
/// (a captured `[len, embed_dim]` hidden tensor for `bottom`'s split).
pub fn reconstruct_embeddings(
    bottom: &BottomView<'_>,
    target: &Tensor,
    cfg: &AttackConfig,
) -> Result<ReconstructionOutcome, AttackError> {
    cfg.validate()?;
    let (len, d) = validate_target(bottom, target)?;
    let mut h_w = initial_embeddings(bottom, cfg, len, d)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.step_size, &[len * d]);
    let mut initial_loss = 0.0f64;

    for step in 0..=cfg.max_steps {
        let mut g = GradGraph::new();
        let h_id = g.leaf(
            Tensor::new(vec![len, d], h_w.clone())
                .map_err(|source| AttackError::Graph { step, source })?
                .requires_grad(true),
        );
        let pred = bottom.build_from_embeddings_on(&mut g, h_id)?;
        let pred_data = g.data(pred);
        let cosine = aggregate_cosine(pred_data, &target.data, len, d, cfg.aggregation);
        let loss_now = squared_distance_f64(pred_data, &target.data);
        if step == 0 {
            initial_loss = loss_now;
        }
        if cosine >= cfg.cosine_stop as f64 || step == cfg.max_steps {
            return Ok(ReconstructionOutcome {
                embeddings: Tensor::new(vec![len, d], h_w)
                    .map_err(|source| AttackError::Graph { step, source })?,
                steps: step,
                final_cosine: cosine,
                initial_loss,
                final_loss: loss_now,
            });
        }
        let t_id = g.constant(target.clone());
        let diff = g
            .sub(pred, t_id)
            .map_err(|source| AttackError::Graph { step, source })?;
        let loss = g
            .squared_l2(diff)
            .map_err(|source| AttackError::Graph { step, source })?;
        g.backward(loss)
            .map_err(|source| AttackError::Graph { step, source })?;
        let grad = g.grad(h_id).expect("leaf tracked by construction");
        opt.step(&mut [&mut h_w], &[Some(grad)])
            .map_err(|source| AttackError::Optim { step, source })?;
    }
    unreachable!("loop returns at the stop rule or the step budget");
}

/// Maps each reconstructed embedding row to the vocabulary token whose
/// embedding has the highest cosine similarity (ties to the lowest id).
/// A zero-norm row cannot be matched and maps to token 0 with a warning.
pub fn recover_tokens(h_w: &Tensor, word_embeddings: &[f32], vocab_size: usize) -> Vec<u32> {
    let d = h_w.shape[1];
    let len = h_w.shape[0];
    debug_assert_eq!(word_embeddings.len(), vocab_size * d);
    let mut out = Vec::with_capacity(len);
    for r in 0..len {
        let row = &h_w.data[r * d..(r + 1) * d];
        if row.iter().all(|&v| v == 0.0) {
            log::warn!("position {r}: zero-norm reconstruction, defaulting to token 0");
            out.push(0);
            continue;
        }
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for t in 0..vocab_size {
            let cand = &word_embeddings[t * d..(t + 1) * d];
            let c = cosine_f64(row, cand);
            if c > best_cos {
                best_cos = c;
                best = t;
            }
        }
        out.push(best as u32);
    }
    out
}

/// Runs the full attack against a captured frame: validates that the frame
/// matches the attacker's bottom view, reconstructs embeddings, recovers
/// tokens. `wall_ms` is measured here.
pub fn attack_frame(
    bottom: &BottomView<'_>,
    frame: &HiddenFrame,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    if frame.split_layer as usize != bottom.split_layer() {
        return Err(AttackError::SplitMismatch {
            frame: frame.split_layer,
            bottom: bottom.split_layer(),
        });
    }
    if frame.embed_dim as usize != bottom.config().embed_dim {
        return Err(AttackError::BadTarget {
            got: vec![frame.seq_len as usize, frame.embed_dim as usize],
            embed_dim: bottom.config().embed_dim,
        });
    }
    let target = frame
        .to_tensor()
        .map_err(|e| AttackError::BadFrame(e.to_string()))?;
    let start = std::time::Instant::now();
    let outcome = reconstruct_embeddings(bottom, &target, cfg)?;
    let recovered = recover_tokens(
        &outcome.embeddings,
        bottom.word_embeddings(),
        bottom.config().vocab_size,
    );
    Ok(AttackResult {
        embeddings: outcome.embeddings,
        recovered,
        steps: outcome.steps,
        final_cosine: outcome.final_cosine,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Softmax-relaxed baseline: optimises a per-position distribution over the
/// vocabulary and forms embeddings as `softmax(v) . W`. Tokens are read off
/// as the argmax of each position's relaxation.
pub fn direct_token_baseline(
    bottom: &BottomView<'_>,
    target: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let (len, d) = validate_target(bottom, target)?;
    let vocab = bottom.config().vocab_size;
    let start = std::time::Instant::now();
    // Zero logits = uniform relaxation over the vocabulary.
    let mut v = vec![0.0f32; len * vocab];
    let mut opt = Optimizer::new(cfg.optimizer, cfg.step_size, &[len * vocab]);
    let w_table = Tensor::new(vec![vocab, d], bottom.word_embeddings().to_vec())
        .map_err(|source| AttackError::Graph { step: 0, source })?;

    let build = |v_data: &[f32],
                     step: u32|
     -> Result<(GradGraph, crate::tensor::TensorId, crate::tensor::TensorId), AttackError> {
        let mut g = GradGraph::new();
        let v_id = g.leaf(
            Tensor::new(vec![len, vocab], v_data.to_vec())
                .map_err(|source| AttackError::Graph { step, source })?
                .requires_grad(true),
        );
        let s = g
            .softmax_rows(v_id)
            .map_err(|source| AttackError::Graph { step, source })?;
        let w_id = g.constant(w_table.clone());
        let h_w = g
            .matmul(s, w_id)
            .map_err(|source| AttackError::Graph { step, source })?;
        let pred = bottom.build_from_embeddings_on(&mut g, h_w)?;
        Ok((g, v_id, pred))
    };

    for step in 0..=cfg.max_steps {
        let (mut g, v_id, pred) = build(&v, step)?;
        let cosine = aggregate_cosine(g.data(pred), &target.data, len, d, cfg.aggregation);
        if cosine >= cfg.cosine_stop as f64 || step == cfg.max_steps {
            let recovered: Vec<u32> = (0..len)
                .map(|r| argmax(&v[r * vocab..(r + 1) * vocab]) as u32)
                .collect();
            // materialise the relaxed embeddings for inspection
            let s_id = g
                .softmax_rows(v_id)
                .map_err(|source| AttackError::Graph { step, source })?;
            let w_id = g.constant(w_table.clone());
            let h_w = g
                .matmul(s_id, w_id)
                .map_err(|source| AttackError::Graph { step, source })?;
            let embeddings = g.value(h_w).clone();
            return Ok(AttackResult {
                embeddings,
                recovered,
                steps: step,
                final_cosine: cosine,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        let t_id = g.constant(target.clone());
        let diff = g
            .sub(pred, t_id)
            .map_err(|source| AttackError::Graph { step, source })?;
        let loss = g
            .squared_l2(diff)
            .map_err(|source| AttackError::Graph { step, source })?;
        g.backward(loss)
            .map_err(|source| AttackError::Graph { step, source })?;
        let grad = g.grad(v_id).expect("leaf tracked by construction");
        opt.step(&mut [&mut v], &[Some(grad)])
            .map_err(|source| AttackError::Optim { step, source })?;
    }
    unreachable!("loop returns at the stop rule or the step budget");
}
