//! Checkpoint serialisation.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLK1"                       4-byte magic
//! u32                          length of the config JSON
//! config JSON                  serde_json of ModelConfig
//! parameters                   raw f32 LE, buffers in canonical order
//! u32                          CRC32 of every preceding byte
//! ```
//!
//! The parameter section carries no per-buffer framing: buffer sizes are
//! fully determined by the config, and the total file length is validated
//! against it before anything is parsed.

use super::{ModelConfig, ModelError, ParamSet, TransformerModel};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("file has {got} bytes, expected {expected} for this config")]
    SizeMismatch { expected: usize, got: usize },
    #[error("file truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn to_bytes(model: &TransformerModel) -> Result<Vec<u8>, CheckpointError> {
    let config_json = serde_json::to_vec(&model.config)?;
    let param_count = model.params.total_len();
    let mut out = Vec::with_capacity(4 + 4 + config_json.len() + 4 * param_count + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    for buf in model.params.buffers() {
        for &v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TransformerModel, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            needed: 8,
            got: bytes.len(),
        });
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
            expected: CHECKPOINT_MAGIC,
        });
    }
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_len = 8 + json_len;
    if bytes.len() < header_len + 4 {
        return Err(CheckpointError::Truncated {
            needed: header_len + 4,
            got: bytes.len(),
        });
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[8..header_len])?;
    config
        .validate()
        .map_err(|e: ModelError| CheckpointError::Invalid(e.to_string()))?;
    let expected = header_len + 4 * config.param_count() + 4;
    if bytes.len() != expected {
        return Err(CheckpointError::SizeMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    let mut cursor = header_len;
    let mut read_buf = |n: usize| -> Result<Vec<f32>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(CheckpointError::Invalid(
                    "non-finite parameter value".into(),
                ));
            }
            out.push(v);
            cursor += 4;
        }
        Ok(out)
    };

    let shapes = config.buffer_shapes();
    let mut flat: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
    for (_, shape) in &shapes {
        flat.push(read_buf(shape.iter().product())?);
    }
    let params = param_set_from_flat(&config, flat);
    Ok(TransformerModel { config, params })
}

/// Rebuilds a [`ParamSet`] from buffers in canonical order.
fn param_set_from_flat(config: &ModelConfig, flat: Vec<Vec<f32>>) -> ParamSet {
    let mut it = flat.into_iter();
    let mut next = || it.next().expect("buffer count checked against config");
    let w_embed = next();
    let p_embed = next();
    let blocks = (0..config.n_layers)
        .map(|_| super::BlockParams {
            ln1_g: next(),
            ln1_b: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_g: next(),
            ln2_b: next(),
            w_fc: next(),
            b_fc: next(),
            w_proj: next(),
            b_proj: next(),
        })
        .collect();
    ParamSet {
        w_embed,
        p_embed,
        blocks,
        ln_f_g: next(),
        ln_f_b: next(),
        w_out: next(),
        b_out: next(),
    }
}

pub fn save(model: &TransformerModel, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TransformerModel, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        let cfg = ModelConfig {
            vocab_size: 13,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
        };
        TransformerModel::init_random(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.params, m.params);
        // re-serialising the loaded model reproduces the file byte-for-byte
        assert_eq!(to_bytes(&loaded).unwrap(), bytes);
    }

    #[test]
    fn save_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.slk");
        let m = model();
        m.save(&path).unwrap();
        let loaded = TransformerModel::load(&path).unwrap();
        assert_eq!(loaded.params, m.params);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn truncated_and_oversized_are_rejected() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 9]),
            Err(CheckpointError::SizeMismatch { .. })
        ));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            from_bytes(&longer),
            Err(CheckpointError::SizeMismatch { .. })
        ));
        assert!(matches!(
            from_bytes(&bytes[..3]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}
