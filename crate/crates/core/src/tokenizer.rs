//! Reversible byte-level tokenizer.
//!
//! Every byte value maps to its own token id (0..=255); three reserved ids
//! follow for padding, begin-of-sequence, and the attack's filler token.
//! Encoding is length-preserving and lossless, so token-wise comparisons
//! between an original input and a reconstruction are always aligned.

use thiserror::Error;

/// Total vocabulary size: 256 byte tokens + 3 specials.
pub const VOCAB_SIZE: usize = 259;
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
/// Neutral token used to initialise reconstruction attacks.
pub const FILLER: u32 = 258;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidId { id: u32, vocab: usize },
}

/// The byte-level vocabulary. Stateless; exists to give the id/byte mapping
/// a home and a stable API.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn new() -> Self {
        Vocab
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Encodes bytes to token ids; always succeeds and preserves length.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Decodes ids back to bytes. Special tokens are not byte-representable
    /// and are rejected; ids >= [`VOCAB_SIZE`] are rejected.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        ids.iter()
            .map(|&id| {
                if id < 256 {
                    Ok(id as u8)
                } else {
                    Err(TokenizerError::InvalidId {
                        id,
                        vocab: VOCAB_SIZE,
                    })
                }
            })
            .collect()
    }

    /// Lossy human-readable rendering: printable ASCII as-is, specials as
    /// angle-bracket names, everything else as `\xNN`.
    pub fn decode_display(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => out.push_str("<pad>"),
                BOS => out.push_str("<bos>"),
                FILLER => out.push_str("<filler>"),
                0..=255 => {
                    let b = id as u8;
                    if (0x20..0x7f).contains(&b) {
                        out.push(b as char);
                    } else {
                        out.push_str(&format!("\\x{b:02x}"));
                    }
                }
                _ => out.push_str(&format!("<invalid:{id}>")),
            }
        }
        out
    }
}
