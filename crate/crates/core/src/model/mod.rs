//! Decoder-only transformer with a configurable bottom/top split.
//!
//! The model is a standard pre-norm GPT-style stack: token and learned
//! positional embeddings, `n_layers` blocks of masked multi-head attention
//! plus a GELU MLP (both with residual connections), a final layer norm and
//! a linear head to vocabulary logits.
//!
//! A split at layer `k` partitions the stack into a *bottom* view
//! (embeddings and blocks `1..=k`, held by the user) and a *top* view
//! (blocks `k+1..=L`, final norm and head, held by the provider). Both views
//! replay the exact same tape operations the full forward would, so the
//! composition of bottom and top is bit-identical to an unsplit forward.

mod checkpoint;
mod train;

pub use checkpoint::CheckpointError;
pub use train::{train_toy, TrainError, TrainOptions, TrainReport};

use crate::defense::{apply_noise, NoiseSpec};
use crate::tensor::{argmax, GradGraph, Tensor, TensorError, TensorId, LAYER_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("split layer {split} out of range 1..={max}")]
    BadSplit { split: usize, max: usize },
    #[error("embedding input shape {got:?} does not match [len, {embed_dim}]")]
    BadEmbedding { got: Vec<usize>, embed_dim: usize },
    #[error("noise sigma must be non-negative, got {0}")]
    BadSigma(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters. Serialised into checkpoints, so two
/// parties can validate they agree on the model they are splitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The desk-scale configuration used by the experiments.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            embed_dim: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Canonical parameter buffers: name and shape, in the order used by
    /// forward passes, optimizer state and the checkpoint payload.
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, 4 * self.embed_dim);
        let mut out = vec![
            ("w_embed".to_string(), vec![v, d]),
            ("p_embed".to_string(), vec![self.max_seq_len, d]),
        ];
        for b in 0..self.n_layers {
            let f = |name: &str| format!("block{b}.{name}");
            out.push((f("ln1_g"), vec![d]));
            out.push((f("ln1_b"), vec![d]));
            out.push((f("w_q"), vec![d, d]));
            out.push((f("b_q"), vec![d]));
            out.push((f("w_k"), vec![d, d]));
            out.push((f("b_k"), vec![d]));
            out.push((f("w_v"), vec![d, d]));
            out.push((f("b_v"), vec![d]));
            out.push((f("w_o"), vec![d, d]));
            out.push((f("b_o"), vec![d]));
            out.push((f("ln2_g"), vec![d]));
            out.push((f("ln2_b"), vec![d]));
            out.push((f("w_fc"), vec![d, h]));
            out.push((f("b_fc"), vec![h]));
            out.push((f("w_proj"), vec![h, d]));
            out.push((f("b_proj"), vec![d]));
        }
        out.push(("ln_f_g".to_string(), vec![d]));
        out.push(("ln_f_b".to_string(), vec![d]));
        out.push(("w_out".to_string(), vec![d, v]));
        out.push(("b_out".to_string(), vec![v]));
        out
    }

    /// Closed-form parameter count; must agree with the sum of buffer sizes.
    pub fn param_count(&self) -> usize {
        let (v, d, l) = (self.vocab_size, self.embed_dim, self.n_layers);
        let per_block = 12 * d * d + 13 * d;
        d * (v + self.max_seq_len) + l * per_block + 2 * d + d * v + v
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w_q: Vec<f32>,
    pub b_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub b_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub b_v: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_fc: Vec<f32>,
    pub b_fc: Vec<f32>,
    pub w_proj: Vec<f32>,
    pub b_proj: Vec<f32>,
}

/// All model parameters as flat row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub w_embed: Vec<f32>,
    pub p_embed: Vec<f32>,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Vec<f32>,
    pub ln_f_b: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

impl ParamSet {
    /// Buffers in canonical order (see [`ModelConfig::buffer_shapes`]).
    pub fn buffers(&self) -> Vec<&Vec<f32>> {
        let mut out: Vec<&Vec<f32>> = vec![&self.w_embed, &self.p_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.w_q, &b.b_q, &b.w_k, &b.b_k, &b.w_v, &b.b_v, &b.w_o,
                &b.b_o, &b.ln2_g, &b.ln2_b, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj,
            ]);
        }
        out.extend([&self.ln_f_g, &self.ln_f_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.w_embed, &mut self.p_embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.w_q,
                &mut b.b_q,
                &mut b.w_k,
                &mut b.b_k,
                &mut b.w_v,
                &mut b.b_v,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([
            &mut self.ln_f_g,
            &mut self.ln_f_b,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn total_len(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// Block index per buffer (in [`ParamSet::buffers`] order); `None` for
    /// the embeddings and the final layer-norm/head.
    pub fn buffer_blocks(&self) -> Vec<Option<usize>> {
        let mut out = vec![None, None]; // w_embed, p_embed
        for (i, _) in self.blocks.iter().enumerate() {
            out.extend(std::iter::repeat(Some(i)).take(16));
        }
        out.extend([None, None, None, None]); // ln_f, w_out, b_out
        out
    }

    /// Which buffers (in [`ParamSet::buffers`] order) weight decay applies to:
    /// the projection matrices only — embeddings, layer-norm parameters, and
    /// biases are exempt, as in the usual transformer recipe.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![false, false]; // w_embed, p_embed
        for _ in &self.blocks {
            out.extend([
                false, false, // ln1
                true, false, // w_q, b_q
                true, false, // w_k, b_k
                true, false, // w_v, b_v
                true, false, // w_o, b_o
                false, false, // ln2
                true, false, // w_fc, b_fc
                true, false, // w_proj, b_proj
            ]);
        }
        out.extend([false, false, true, false]); // ln_f, w_out, b_out
        out
    }
}

/// The full model: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl TransformerModel {
    /// Random initialisation: weights from N(0, 0.02^2), biases and layer
    /// norm shifts at 0, layer norm scales at 1. Deterministic in `seed`.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut gauss = |n: usize| -> Vec<f32> {
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        let (v, d) = (config.vocab_size, config.embed_dim);
        let h = 4 * d;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w_q: gauss(d * d),
                b_q: vec![0.0; d],
                w_k: gauss(d * d),
                b_k: vec![0.0; d],
                w_v: gauss(d * d),
                b_v: vec![0.0; d],
                w_o: gauss(d * d),
                b_o: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w_fc: gauss(d * h),
                b_fc: vec![0.0; h],
                w_proj: gauss(h * d),
                b_proj: vec![0.0; d],
            })
            .collect();
        let params = ParamSet {
            w_embed: gauss(v * d),
            p_embed: gauss(config.max_seq_len * d),
            blocks,
            ln_f_g: vec![1.0; d],
            ln_f_b: vec![0.0; d],
            w_out: gauss(d * v),
            b_out: vec![0.0; v],
        };
        Ok(TransformerModel { config, params })
    }

    pub fn bottom_view(&self, split: usize) -> Result<BottomView<'_>, ModelError> {
        self.check_split(split)?;
        Ok(BottomView { model: self, split })
    }

    pub fn top_view(&self, split: usize) -> Result<TopView<'_>, ModelError> {
        self.check_split(split)?;
        Ok(TopView { model: self, split })
    }

    fn check_split(&self, split: usize) -> Result<(), ModelError> {
        // A split after the last block would leave the top with no
        // transformer computation; keep at least one block on each side.
        if split == 0 || split >= self.config.n_layers {
            return Err(ModelError::BadSplit {
                split,
                max: self.config.n_layers - 1,
            });
        }
        Ok(())
    }

    /// Unsplit forward pass: token ids to logits `[len, vocab_size]`.
    pub fn forward_full(&self, ids: &[u32]) -> Result<Tensor, ModelError> {
        let ids = self.validate_ids(ids)?;
        let mut g = GradGraph::new();
        let mut sink = Vec::new();
        let x = self.build_embedding(&mut g, &ids, false, &mut sink)?;
        let x = self.build_blocks(&mut g, x, 0, self.config.n_layers, false, &mut sink)?;
        let logits = self.build_head(&mut g, x, false, &mut sink)?;
        Ok(g.value(logits).clone())
    }

    fn validate_ids(&self, ids: &[u32]) -> Result<Vec<usize>, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        ids.iter()
            .map(|&id| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(ModelError::BadToken {
                        id,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Inserts a parameter as a graph leaf, recording it in `sink` so
    /// training can map gradients back to buffers by position.
    fn param_leaf(
        &self,
        g: &mut GradGraph,
        data: &[f32],
        shape: Vec<usize>,
        train: bool,
        sink: &mut Vec<TensorId>,
    ) -> TensorId {
        let t = Tensor {
            shape,
            data: data.to_vec(),
            requires_grad: train,
            grad: None,
        };
        let id = g.leaf(t);
        sink.push(id);
        id
    }

    /// Word embedding of `ids` plus positional embedding rows `0..len`.
    fn build_embedding(
        &self,
        g: &mut GradGraph,
        ids: &[usize],
        train: bool,
        sink: &mut Vec<TensorId>,
    ) -> Result<TensorId, ModelError> {
        let (v, d) = (self.config.vocab_size, self.config.embed_dim);
        let w = self.param_leaf(g, &self.params.w_embed, vec![v, d], train, sink);
        let p = self.param_leaf(
            g,
            &self.params.p_embed,
            vec![self.config.max_seq_len, d],
            train,
            sink,
        );
        let hw = g.gather(w, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let hp = g.gather(p, &positions)?;
        Ok(g.add(hw, hp)?)
    }

    /// As [`Self::build_embedding`], but the word-embedding part is an
    /// existing graph node (the attack's optimisation variable).
    fn build_embedding_from(
        &self,
        g: &mut GradGraph,
        h_w: TensorId,
        len: usize,
    ) -> Result<TensorId, ModelError> {
        let d = self.config.embed_dim;
        let mut sink = Vec::new();
        let p = self.param_leaf(
            g,
            &self.params.p_embed,
            vec![self.config.max_seq_len, d],
            false,
            &mut sink,
        );
        let positions: Vec<usize> = (0..len).collect();
        let hp = g.gather(p, &positions)?;
        Ok(g.add(h_w, hp)?)
    }

    /// Applies blocks `from..to` to `x`.
    fn build_blocks(
        &self,
        g: &mut GradGraph,
        mut x: TensorId,
        from: usize,
        to: usize,
        train: bool,
        sink: &mut Vec<TensorId>,
    ) -> Result<TensorId, ModelError> {
        for li in from..to {
            x = self.build_block(g, x, li, train, sink)?;
        }
        Ok(x)
    }

    fn build_block(
        &self,
        g: &mut GradGraph,
        x: TensorId,
        li: usize,
        train: bool,
        sink: &mut Vec<TensorId>,
    ) -> Result<TensorId, ModelError> {
        let d = self.config.embed_dim;
        let hd = self.config.head_dim();
        let nh = self.config.n_heads;
        let b = &self.params.blocks[li];

        // Leaves in canonical buffer order.
        let ln1_g = self.param_leaf(g, &b.ln1_g, vec![d], train, sink);
        let ln1_b = self.param_leaf(g, &b.ln1_b, vec![d], train, sink);
        let w_q = self.param_leaf(g, &b.w_q, vec![d, d], train, sink);
        let b_q = self.param_leaf(g, &b.b_q, vec![d], train, sink);
        let w_k = self.param_leaf(g, &b.w_k, vec![d, d], train, sink);
        let b_k = self.param_leaf(g, &b.b_k, vec![d], train, sink);
        let w_v = self.param_leaf(g, &b.w_v, vec![d, d], train, sink);
        let b_v = self.param_leaf(g, &b.b_v, vec![d], train, sink);
        let w_o = self.param_leaf(g, &b.w_o, vec![d, d], train, sink);
        let b_o = self.param_leaf(g, &b.b_o, vec![d], train, sink);
        let ln2_g = self.param_leaf(g, &b.ln2_g, vec![d], train, sink);
        let ln2_b = self.param_leaf(g, &b.ln2_b, vec![d], train, sink);
        let w_fc = self.param_leaf(g, &b.w_fc, vec![d, 4 * d], train, sink);
        let b_fc = self.param_leaf(g, &b.b_fc, vec![4 * d], train, sink);
        let w_proj = self.param_leaf(g, &b.w_proj, vec![4 * d, d], train, sink);
        let b_proj = self.param_leaf(g, &b.b_proj, vec![d], train, sink);

        // Masked multi-head self-attention on the pre-normed input.
        let xn = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
        let q = g.matmul(xn, w_q)?;
        let q = g.add_bias(q, b_q)?;
        let k = g.matmul(xn, w_k)?;
        let k = g.add_bias(k, b_k)?;
        let v = g.matmul(xn, w_v)?;
        let v = g.add_bias(v, b_v)?;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(nh);
        for hi in 0..nh {
            let qh = g.slice_cols(q, hi * hd, hd)?;
            let kh = g.slice_cols(k, hi * hd, hd)?;
            let vh = g.slice_cols(v, hi * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let masked = g.causal_mask(scores)?;
            let attn = g.softmax_rows(masked)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let proj = g.matmul(cat, w_o)?;
        let proj = g.add_bias(proj, b_o)?;
        let x = g.add(x, proj)?;

        // Position-wise MLP with GELU.
        let xn = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        let h1 = g.matmul(xn, w_fc)?;
        let h1 = g.add_bias(h1, b_fc)?;
        let h1 = g.gelu(h1)?;
        let mlp = g.matmul(h1, w_proj)?;
        let mlp = g.add_bias(mlp, b_proj)?;
        Ok(g.add(x, mlp)?)
    }

    /// Final layer norm plus the linear head to logits.
    fn build_head(
        &self,
        g: &mut GradGraph,
        x: TensorId,
        train: bool,
        sink: &mut Vec<TensorId>,
    ) -> Result<TensorId, ModelError> {
        let (v, d) = (self.config.vocab_size, self.config.embed_dim);
        let ln_g = self.param_leaf(g, &self.params.ln_f_g, vec![d], train, sink);
        let ln_b = self.param_leaf(g, &self.params.ln_f_b, vec![d], train, sink);
        let w_out = self.param_leaf(g, &self.params.w_out, vec![d, v], train, sink);
        let b_out = self.param_leaf(g, &self.params.b_out, vec![v], train, sink);
        let xn = g.layer_norm(x, ln_g, ln_b, LAYER_NORM_EPS)?;
        let logits = g.matmul(xn, w_out)?;
        Ok(g.add_bias(logits, b_out)?)
    }

    /// Training forward: all parameters inserted with gradient tracking.
    /// Returns the leaf ids (canonical order), the logits node, and each
    /// block's output node (for activation regularization).
    pub(crate) fn build_train_forward(
        &self,
        g: &mut GradGraph,
        ids: &[u32],
    ) -> Result<(Vec<TensorId>, TensorId, Vec<TensorId>), ModelError> {
        let ids = self.validate_ids(ids)?;
        let mut sink = Vec::new();
        let mut x = self.build_embedding(g, &ids, true, &mut sink)?;
        let mut block_outputs = Vec::with_capacity(self.config.n_layers);
        for li in 0..self.config.n_layers {
            x = self.build_block(g, x, li, true, &mut sink)?;
            block_outputs.push(x);
        }
        let logits = self.build_head(g, x, true, &mut sink)?;
        debug_assert_eq!(sink.len(), self.config.buffer_shapes().len());
        Ok((sink, logits, block_outputs))
    }

    /// Next-token top-1 accuracy over `corpus`, with Gaussian noise of level
    /// `sigma` injected at the split boundary before the top half runs.
    ///
    /// For `sigma > 0` the accuracy is averaged over `draws` independent
    /// noise seeds derived from `base_seed`; for `sigma == 0` one pass
    /// suffices. Deterministic in all arguments.
    pub fn utility_accuracy(
        &self,
        corpus: &[&[u32]],
        split: usize,
        sigma: f32,
        base_seed: u64,
        draws: usize,
    ) -> Result<f64, ModelError> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(ModelError::BadSigma(sigma));
        }
        let bottom = self.bottom_view(split)?;
        let top = self.top_view(split)?;
        let draws = if sigma == 0.0 { 1 } else { draws.max(1) };
        let mut correct = 0u64;
        let mut total = 0u64;
        for (si, seq) in corpus.iter().enumerate() {
            if seq.len() < 2 {
                continue;
            }
            let prefix = &seq[..seq.len() - 1];
            let h = bottom.forward(prefix)?;
            for draw in 0..draws {
                let spec = NoiseSpec {
                    sigma,
                    seed: base_seed
                        .wrapping_add(si as u64)
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(draw as u64),
                };
                let noised = apply_noise(&h, &spec).map_err(|_| ModelError::BadSigma(sigma))?;
                let logits = top.forward(&noised)?;
                let v = self.config.vocab_size;
                for (pos, &want) in seq[1..].iter().enumerate() {
                    let row = &logits.data[pos * v..(pos + 1) * v];
                    if argmax(row) as u32 == want {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(ModelError::EmptyInput);
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        checkpoint::load(path)
    }
}

/// User-side half: embeddings and blocks `1..=split`.
#[derive(Debug, Clone, Copy)]
pub struct BottomView<'m> {
    model: &'m TransformerModel,
    split: usize,
}

impl BottomView<'_> {
    pub fn split_layer(&self) -> usize {
        self.split
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Row-major `[vocab_size, embed_dim]` word-embedding table. Part of the
    /// bottom half, so available to the white-box attacker.
    pub fn word_embeddings(&self) -> &[f32] {
        &self.model.params.w_embed
    }

    /// Hidden embeddings `[len, embed_dim]` for a token sequence.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor, ModelError> {
        let ids = self.model.validate_ids(ids)?;
        let mut g = GradGraph::new();
        let mut sink = Vec::new();
        let x = self.model.build_embedding(&mut g, &ids, false, &mut sink)?;
        let out = self
            .model
            .build_blocks(&mut g, x, 0, self.split, false, &mut sink)?;
        Ok(g.value(out).clone())
    }

    /// Hidden embeddings from caller-supplied word embeddings `[len, d]`
    /// (positional embeddings are added inside).
    pub fn forward_from_embeddings(&self, h_w: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = GradGraph::new();
        let id = g.constant(h_w.clone());
        let out = self.build_from_embeddings_on(&mut g, id)?;
        Ok(g.value(out).clone())
    }

    /// Graph-building variant of [`Self::forward_from_embeddings`]: `h_w`
    /// is an existing node, so callers can differentiate through the bottom
    /// stack (this is the attack's reconstruction path).
    pub fn build_from_embeddings_on(
        &self,
        g: &mut GradGraph,
        h_w: TensorId,
    ) -> Result<TensorId, ModelError> {
        let shape = g.shape(h_w).to_vec();
        if shape.len() != 2 || shape[1] != self.model.config.embed_dim {
            return Err(ModelError::BadEmbedding {
                got: shape,
                embed_dim: self.model.config.embed_dim,
            });
        }
        let len = shape[0];
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > self.model.config.max_seq_len {
            return Err(ModelError::TooLong {
                len,
                max: self.model.config.max_seq_len,
            });
        }
        let mut sink = Vec::new();
        let x = self.model.build_embedding_from(g, h_w, len)?;
        self.model
            .build_blocks(g, x, 0, self.split, false, &mut sink)
    }
}

/// Provider-side half: blocks `split+1..=L`, final norm and head.
#[derive(Debug, Clone, Copy)]
pub struct TopView<'m> {
    model: &'m TransformerModel,
    split: usize,
}

impl TopView<'_> {
    pub fn split_layer(&self) -> usize {
        self.split
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Logits `[len, vocab_size]` from hidden embeddings `[len, embed_dim]`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        let cfg = &self.model.config;
        if h.shape.len() != 2 || h.shape[1] != cfg.embed_dim {
            return Err(ModelError::BadEmbedding {
                got: h.shape.clone(),
                embed_dim: cfg.embed_dim,
            });
        }
        if h.shape[0] == 0 {
            return Err(ModelError::EmptyInput);
        }
        if h.shape[0] > cfg.max_seq_len {
            return Err(ModelError::TooLong {
                len: h.shape[0],
                max: cfg.max_seq_len,
            });
        }
        let mut g = GradGraph::new();
        let mut sink = Vec::new();
        let x = g.constant(h.clone());
        let x = self
            .model
            .build_blocks(&mut g, x, self.split, cfg.n_layers, false, &mut sink)?;
        let logits = self.model.build_head(&mut g, x, false, &mut sink)?;
        Ok(g.value(logits).clone())
    }
}
