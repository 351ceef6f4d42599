//! Desk-scale split-learning inference lab for decoder-only transformers.
//!
//! The crate implements the full pipeline of a two-party split-inference
//! deployment and the white-box attack against it:
//!
//! - [`tensor`] — dense f32 tensors with reverse-mode autodiff (dynamic tape)
//! - [`tokenizer`] — reversible byte-level tokenizer (vocab 259)
//! - [`model`] — decoder-only transformer with bottom/top split views,
//!   checkpointing and a toy training loop
//! - [`protocol`] — hidden-embedding exchange between user and provider,
//!   in-process and over TCP
//! - [`attack`] — gradient-based reconstruction of input tokens from captured
//!   hidden embeddings, plus the softmax-relaxed direct-token baseline
//! - [`defense`] — Gaussian noise applied at the split boundary
//! - [`metrics`] — token-wise attack accuracy and exact-match rate
//! - [`harness`] — seeded experiment sweeps (noise level, input length) with
//!   CSV output

pub mod attack;
pub mod corpus;
pub mod defense;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod tensor;
pub mod tokenizer;
