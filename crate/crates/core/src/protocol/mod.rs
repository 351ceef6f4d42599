//! Two-party split-inference protocol.
//!
//! The user runs the bottom half of the model and sends hidden embeddings;
//! the provider runs the top half and answers with logits. Frames are flat
//! binary records with little-endian integers, raw f32 payloads and a
//! trailing CRC32 of everything before it:
//!
//! ```text
//! hidden frame:  seq_len u32 | embed_dim u32 | split_layer u16 | sigma f32
//!                | payload f32 * (seq_len * embed_dim) | crc32 u32
//! logits frame:  seq_len u32 | vocab_size u32
//!                | payload f32 * (seq_len * vocab_size) | crc32 u32
//! ```
//!
//! On the wire (see [`tcp`]) each frame travels inside an envelope of an
//! 8-byte magic, a kind byte and a u32 body length.
//!
//! The provider is modelled as honest-but-curious: [`Provider::handle`]
//! records every hidden frame verbatim before computing on it, and the
//! captured frames are what the attack in [`crate::attack`] consumes. The
//! provider API never sees token ids or the user's noise seed.

pub mod tcp;

use crate::defense::{apply_noise, NoiseSpec};
use crate::model::{BottomView, ModelError, TopView, TransformerModel};
use crate::tensor::Tensor;
use thiserror::Error;

/// Sanity cap on payload sizes parsed from untrusted bytes (in f32 count).
const MAX_PAYLOAD_ELEMS: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad wire magic {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("frame truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("frame has {got} bytes, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("declared payload {seq_len} x {dim} exceeds the protocol limit")]
    DimensionOverflow { seq_len: u32, dim: u32 },
    #[error("peer configuration mismatch: {0}")]
    VersionMismatch(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("peer reported error: {0}")]
    Remote(String),
    #[error("model evaluation failed: {0}")]
    Model(String),
}

impl From<ModelError> for ProtocolError {
    fn from(e: ModelError) -> Self {
        ProtocolError::Model(e.to_string())
    }
}

/// Hidden embeddings in flight from user to provider. `sigma` is the
/// declared noise level (metadata; the seed never leaves the user).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenFrame {
    pub seq_len: u32,
    pub embed_dim: u32,
    pub split_layer: u16,
    pub sigma: f32,
    pub payload: Vec<f32>,
}

/// Logits in flight from provider back to user.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsFrame {
    pub seq_len: u32,
    pub vocab_size: u32,
    pub payload: Vec<f32>,
}

fn check_payload_dims(seq_len: u32, dim: u32) -> Result<usize, ProtocolError> {
    let elems = seq_len as u64 * dim as u64;
    if elems == 0 || elems > MAX_PAYLOAD_ELEMS {
        return Err(ProtocolError::DimensionOverflow { seq_len, dim });
    }
    Ok(elems as usize)
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn split_crc(bytes: &[u8], min_header: usize) -> Result<(&[u8], u32), ProtocolError> {
    if bytes.len() < min_header + 4 {
        return Err(ProtocolError::Truncated {
            needed: min_header + 4,
            got: bytes.len(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    Ok((body, stored))
}

fn verify_crc(body: &[u8], stored: u32) -> Result<(), ProtocolError> {
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ProtocolError::CrcMismatch { stored, computed });
    }
    Ok(())
}

impl HiddenFrame {
    const HEADER: usize = 4 + 4 + 2 + 4;

    pub fn new(h: &Tensor, split_layer: u16, sigma: f32) -> Result<Self, ProtocolError> {
        if h.shape.len() != 2 {
            return Err(ProtocolError::InvalidFrame(format!(
                "hidden tensor must be 2-D, got {:?}",
                h.shape
            )));
        }
        Ok(HiddenFrame {
            seq_len: h.shape[0] as u32,
            embed_dim: h.shape[1] as u32,
            split_layer,
            sigma,
            payload: h.data.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER + 4 * self.payload.len() + 4);
        out.extend_from_slice(&self.seq_len.to_le_bytes());
        out.extend_from_slice(&self.embed_dim.to_le_bytes());
        out.extend_from_slice(&self.split_layer.to_le_bytes());
        out.extend_from_slice(&self.sigma.to_le_bytes());
        push_f32s(&mut out, &self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (body, stored) = split_crc(bytes, Self::HEADER)?;
        let seq_len = u32::from_le_bytes(body[0..4].try_into().unwrap());
        let embed_dim = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let split_layer = u16::from_le_bytes(body[8..10].try_into().unwrap());
        let sigma = f32::from_le_bytes(body[10..14].try_into().unwrap());
        let elems = check_payload_dims(seq_len, embed_dim)?;
        let expected = Self::HEADER + 4 * elems + 4;
        if bytes.len() != expected {
            return Err(ProtocolError::SizeMismatch {
                expected,
                got: bytes.len(),
            });
        }
        verify_crc(body, stored)?;
        Ok(HiddenFrame {
            seq_len,
            embed_dim,
            split_layer,
            sigma,
            payload: parse_f32s(&body[Self::HEADER..]),
        })
    }

    /// Payload as a `[seq_len, embed_dim]` tensor; fails on non-finite
    /// values, which the wire format itself does not forbid.
    pub fn to_tensor(&self) -> Result<Tensor, ProtocolError> {
        Tensor::new(
            vec![self.seq_len as usize, self.embed_dim as usize],
            self.payload.clone(),
        )
        .map_err(|e| ProtocolError::InvalidFrame(e.to_string()))
    }
}

impl LogitsFrame {
    const HEADER: usize = 4 + 4;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER + 4 * self.payload.len() + 4);
        out.extend_from_slice(&self.seq_len.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        push_f32s(&mut out, &self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (body, stored) = split_crc(bytes, Self::HEADER)?;
        let seq_len = u32::from_le_bytes(body[0..4].try_into().unwrap());
        let vocab_size = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let elems = check_payload_dims(seq_len, vocab_size)?;
        let expected = Self::HEADER + 4 * elems + 4;
        if bytes.len() != expected {
            return Err(ProtocolError::SizeMismatch {
                expected,
                got: bytes.len(),
            });
        }
        verify_crc(body, stored)?;
        Ok(LogitsFrame {
            seq_len,
            vocab_size,
            payload: parse_f32s(&body[Self::HEADER..]),
        })
    }
}

/// Provider side: owns the top view and a capture log of every hidden frame
/// it has ever been asked to evaluate.
pub struct Provider<'m> {
    top: TopView<'m>,
    captured: Vec<HiddenFrame>,
}

impl<'m> Provider<'m> {
    pub fn new(model: &'m TransformerModel, split: usize) -> Result<Self, ProtocolError> {
        Ok(Provider {
            top: model.top_view(split)?,
            captured: Vec::new(),
        })
    }

    /// Frames recorded so far, verbatim as received.
    pub fn captured(&self) -> &[HiddenFrame] {
        &self.captured
    }

    /// Evaluates one hidden frame. The frame is captured before any
    /// validation or computation, mirroring an honest-but-curious server
    /// that logs first and answers second.
    pub fn handle(&mut self, frame: HiddenFrame) -> Result<LogitsFrame, ProtocolError> {
        self.captured.push(frame.clone());
        let cfg = self.top.config();
        if frame.split_layer as usize != self.top.split_layer() {
            return Err(ProtocolError::VersionMismatch(format!(
                "frame split layer {} but provider serves split {}",
                frame.split_layer,
                self.top.split_layer()
            )));
        }
        if frame.embed_dim as usize != cfg.embed_dim {
            return Err(ProtocolError::VersionMismatch(format!(
                "frame embed_dim {} but model embed_dim {}",
                frame.embed_dim, cfg.embed_dim
            )));
        }
        if frame.seq_len as usize > cfg.max_seq_len {
            return Err(ProtocolError::InvalidFrame(format!(
                "seq_len {} exceeds max_seq_len {}",
                frame.seq_len, cfg.max_seq_len
            )));
        }
        let h = frame.to_tensor()?;
        let logits = self.top.forward(&h)?;
        Ok(LogitsFrame {
            seq_len: frame.seq_len,
            vocab_size: cfg.vocab_size as u32,
            payload: logits.data,
        })
    }
}

/// Anything that can carry one hidden frame to a provider and bring the
/// logits answer back.
pub trait Transport {
    fn exchange(&mut self, frame: &HiddenFrame) -> Result<LogitsFrame, ProtocolError>;
}

/// Same-process transport: hands the frame straight to a [`Provider`].
pub struct InProcess<'p, 'm> {
    pub provider: &'p mut Provider<'m>,
}

impl Transport for InProcess<'_, '_> {
    fn exchange(&mut self, frame: &HiddenFrame) -> Result<LogitsFrame, ProtocolError> {
        self.provider.handle(frame.clone())
    }
}

/// User side: owns the bottom view and the noise policy.
pub struct UserParty<'m> {
    bottom: BottomView<'m>,
}

impl<'m> UserParty<'m> {
    pub fn new(model: &'m TransformerModel, split: usize) -> Result<Self, ProtocolError> {
        Ok(UserParty {
            bottom: model.bottom_view(split)?,
        })
    }

    pub fn bottom(&self) -> &BottomView<'m> {
        &self.bottom
    }

    /// Builds the (optionally noised) hidden frame for `ids` without
    /// sending it anywhere.
    pub fn prepare_frame(
        &self,
        ids: &[u32],
        noise: &NoiseSpec,
    ) -> Result<HiddenFrame, ProtocolError> {
        let h = self.bottom.forward(ids)?;
        let noised =
            apply_noise(&h, noise).map_err(|e| ProtocolError::InvalidFrame(e.to_string()))?;
        HiddenFrame::new(&noised, self.bottom.split_layer() as u16, noise.sigma)
    }

    /// Full split inference: bottom forward, noise, exchange, validate the
    /// reply, return logits `[len, vocab_size]`.
    pub fn infer<T: Transport>(
        &self,
        transport: &mut T,
        ids: &[u32],
        noise: &NoiseSpec,
    ) -> Result<Tensor, ProtocolError> {
        let frame = self.prepare_frame(ids, noise)?;
        let reply = transport.exchange(&frame)?;
        let cfg = self.bottom.config();
        if reply.seq_len != frame.seq_len || reply.vocab_size as usize != cfg.vocab_size {
            return Err(ProtocolError::VersionMismatch(format!(
                "reply shape [{}, {}] does not match request len {} and vocab {}",
                reply.seq_len, reply.vocab_size, frame.seq_len, cfg.vocab_size
            )));
        }
        Tensor::new(
            vec![reply.seq_len as usize, reply.vocab_size as usize],
            reply.payload,
        )
        .map_err(|e| ProtocolError::InvalidFrame(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> TransformerModel {
        let cfg = ModelConfig {
            vocab_size: 19,
            embed_dim: 8,
            n_layers: 3,
            n_heads: 2,
            max_seq_len: 16,
        };
        TransformerModel::init_random(cfg, 5).unwrap()
    }

    fn sample_frame() -> HiddenFrame {
        HiddenFrame {
            seq_len: 3,
            embed_dim: 4,
            split_layer: 1,
            sigma: 0.5,
            payload: (0..12).map(|i| i as f32 * 0.25 - 1.0).collect(),
        }
    }

    #[test]
    fn hidden_frame_round_trip_is_bit_exact() {
        let f = sample_frame();
        let bytes = f.to_bytes();
        let parsed = HiddenFrame::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, f);
        let bits: Vec<u32> = parsed.payload.iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = f.payload.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn logits_frame_round_trip() {
        let f = LogitsFrame {
            seq_len: 2,
            vocab_size: 5,
            payload: (0..10).map(|i| (i as f32).sin()).collect(),
        };
        assert_eq!(LogitsFrame::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        let bytes = sample_frame().to_bytes();
        for at in [0usize, 7, 14, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            let err = HiddenFrame::from_bytes(&bad).unwrap_err();
            assert!(
                matches!(
                    err,
                    ProtocolError::CrcMismatch { .. }
                        | ProtocolError::SizeMismatch { .. }
                        | ProtocolError::DimensionOverflow { .. }
                ),
                "flip at {at} gave {err:?}"
            );
        }
        // corrupting the stored crc itself
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0xff;
        assert!(matches!(
            HiddenFrame::from_bytes(&bad),
            Err(ProtocolError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn truncated_and_padded_frames_are_rejected() {
        let bytes = sample_frame().to_bytes();
        assert!(HiddenFrame::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(HiddenFrame::from_bytes(&bytes[..5]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(matches!(
            HiddenFrame::from_bytes(&padded),
            Err(ProtocolError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn absurd_dimensions_are_rejected_before_allocation() {
        let mut f = sample_frame();
        f.seq_len = u32::MAX;
        f.embed_dim = u32::MAX;
        // craft header bytes directly: to_bytes would try to honour payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&f.seq_len.to_le_bytes());
        bytes.extend_from_slice(&f.embed_dim.to_le_bytes());
        bytes.extend_from_slice(&f.split_layer.to_le_bytes());
        bytes.extend_from_slice(&f.sigma.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            HiddenFrame::from_bytes(&bytes),
            Err(ProtocolError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn in_process_inference_matches_full_forward() {
        let m = model();
        let ids = [1u32, 2, 3, 4, 5];
        for split in 1..m.config.n_layers {
            let user = UserParty::new(&m, split).unwrap();
            let mut provider = Provider::new(&m, split).unwrap();
            let mut tp = InProcess {
                provider: &mut provider,
            };
            let logits = user
                .infer(&mut tp, &ids, &NoiseSpec { sigma: 0.0, seed: 0 })
                .unwrap();
            let full = m.forward_full(&ids).unwrap();
            assert_eq!(logits.data, full.data);
        }
    }

    #[test]
    fn provider_captures_exactly_what_was_sent() {
        let m = model();
        let user = UserParty::new(&m, 1).unwrap();
        let mut provider = Provider::new(&m, 1).unwrap();
        let noise = NoiseSpec {
            sigma: 0.7,
            seed: 123,
        };
        let frame = user.prepare_frame(&[4, 4, 8], &noise).unwrap();
        {
            let mut tp = InProcess {
                provider: &mut provider,
            };
            user.infer(&mut tp, &[4, 4, 8], &noise).unwrap();
        }
        assert_eq!(provider.captured().len(), 1);
        // capture equals the user's post-noise frame bit-for-bit
        assert_eq!(provider.captured()[0], frame);
        // and differs from the clean embeddings, since sigma > 0
        let clean = user.bottom().forward(&[4, 4, 8]).unwrap();
        assert_ne!(provider.captured()[0].payload, clean.data);
    }

    #[test]
    fn provider_rejects_mismatched_split_or_dim() {
        let m = model();
        let mut provider = Provider::new(&m, 2).unwrap();
        let mut frame = sample_frame();
        frame.embed_dim = 8;
        frame.payload = vec![0.1; 24];
        frame.split_layer = 1; // provider serves split 2
        assert!(matches!(
            provider.handle(frame.clone()),
            Err(ProtocolError::VersionMismatch(_))
        ));
        frame.split_layer = 2;
        frame.embed_dim = 4;
        frame.payload = vec![0.1; 12];
        assert!(matches!(
            provider.handle(frame),
            Err(ProtocolError::VersionMismatch(_))
        ));
        // both attempts were still captured
        assert_eq!(provider.captured().len(), 2);
    }

    #[test]
    fn provider_rejects_non_finite_payload() {
        let m = model();
        let mut provider = Provider::new(&m, 1).unwrap();
        let mut frame = HiddenFrame {
            seq_len: 2,
            embed_dim: 8,
            split_layer: 1,
            sigma: 0.0,
            payload: vec![0.0; 16],
        };
        frame.payload[3] = f32::NAN;
        // the wire layer happily round-trips NaN bits...
        let round = HiddenFrame::from_bytes(&frame.to_bytes()).unwrap();
        assert!(round.payload[3].is_nan());
        // ...but evaluation refuses them
        assert!(matches!(
            provider.handle(round),
            Err(ProtocolError::InvalidFrame(_))
        ));
    }
}
