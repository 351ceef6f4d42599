//! Input corpora for training and experiments.
//!
//! Three sources, all deterministic in their seed:
//!
//! - periodic lowercase patterns — the toy training distribution, easy for
//!   a small model to learn so that utility degradation under noise is
//!   visible;
//! - windows of an embedded plain-text sample — naturalistic inputs for
//!   attack sweeps;
//! - uniform random bytes — worst-case inputs with no structure to lean on.

use crate::tokenizer::Vocab;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Embedded plain-text sample used by the sweep harness.
pub const TEXT_SAMPLE: &str = include_str!("../data/sample.txt");

/// Offset mixed into a seed to derive the held-out pattern stream; keeps
/// evaluation sequences disjoint from training sequences drawn with the
/// same base seed.
const HELD_OUT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Periodic strings over `a..=z`: a random period in `1..=4` repeated to
/// `seq_len`. Returns `count` token sequences.
///
/// Periods are kept short so the desk model learns the copy rule quickly;
/// long-period induction needs far more training, and heavily trained
/// checkpoints grow block activations enough to complicate reconstruction
/// experiments (see the training regularizers in the model module).
pub fn pattern_corpus(count: usize, seq_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let vocab = Vocab::new();
    (0..count)
        .map(|_| {
            let period = rng.random_range(1..=4usize);
            let motif: Vec<u8> = (0..period).map(|_| rng.random_range(b'a'..=b'z')).collect();
            let bytes: Vec<u8> = (0..seq_len).map(|i| motif[i % period]).collect();
            vocab.encode(&bytes)
        })
        .collect()
}

/// Pattern sequences from a seed stream disjoint from [`pattern_corpus`]
/// with the same `seed`; used for held-out evaluation.
pub fn held_out_patterns(count: usize, seq_len: usize, seed: u64) -> Vec<Vec<u32>> {
    pattern_corpus(count, seq_len, seed ^ HELD_OUT_SALT)
}

/// A random `len`-byte window of the embedded text sample.
pub fn text_window(len: usize, seed: u64) -> Vec<u32> {
    let bytes = TEXT_SAMPLE.as_bytes();
    assert!(
        len <= bytes.len(),
        "window of {len} bytes exceeds the {}-byte sample",
        bytes.len()
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=bytes.len() - len);
    Vocab::new().encode(&bytes[start..start + len])
}

/// `len` uniform random bytes as tokens.
pub fn random_bytes(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..256u32)).collect()
}
