//! Loopback TCP transport for the split-inference protocol.
//!
//! Every message is an envelope around a frame:
//!
//! ```text
//! "SPLT0001"   8-byte magic
//! kind         u8: 1 = hidden frame, 2 = logits frame, 3 = error (UTF-8)
//! body_len     u32 LE
//! body         frame bytes as produced by to_bytes()
//! ```
//!
//! The server answers every hidden frame on the same connection, reporting
//! evaluation failures as kind-3 messages instead of dropping the link.

use super::{HiddenFrame, LogitsFrame, ProtocolError};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

pub const WIRE_MAGIC: [u8; 8] = *b"SPLT0001";

pub const KIND_HIDDEN: u8 = 1;
pub const KIND_LOGITS: u8 = 2;
pub const KIND_ERROR: u8 = 3;

/// Upper bound on envelope bodies; matches the frame-level payload cap.
const MAX_BODY_BYTES: u32 = 1 << 27;

pub fn write_message<W: Write>(w: &mut W, kind: u8, body: &[u8]) -> Result<(), ProtocolError> {
    w.write_all(&WIRE_MAGIC)?;
    w.write_all(&[kind])?;
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one envelope. Returns `Ok(None)` on clean EOF at a message
/// boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>, ProtocolError> {
    let mut magic = [0u8; 8];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if magic != WIRE_MAGIC {
        return Err(ProtocolError::BadMagic { found: magic });
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_BODY_BYTES {
        return Err(ProtocolError::SizeMismatch {
            expected: MAX_BODY_BYTES as usize,
            got: len as usize,
        });
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some((kind[0], body)))
}

/// Client side of the wire protocol.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(host: &str, port: u16) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect((host, port))?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl super::Transport for TcpTransport {
    fn exchange(&mut self, frame: &HiddenFrame) -> Result<LogitsFrame, ProtocolError> {
        write_message(&mut self.stream, KIND_HIDDEN, &frame.to_bytes())?;
        let Some((kind, body)) = read_message(&mut self.stream)? else {
            return Err(ProtocolError::Remote("connection closed mid-exchange".into()));
        };
        match kind {
            KIND_LOGITS => LogitsFrame::from_bytes(&body),
            KIND_ERROR => Err(ProtocolError::Remote(
                String::from_utf8_lossy(&body).into_owned(),
            )),
            other => Err(ProtocolError::BadKind(other)),
        }
    }
}

/// Serves split inference on `listener` until `max_requests` hidden frames
/// have been handled (forever if `None`). Returns the provider's capture
/// log. Connections are served one at a time; evaluation errors are
/// reported to the peer and do not stop the server.
pub fn serve(
    listener: &TcpListener,
    model: &crate::model::TransformerModel,
    split: usize,
    max_requests: Option<usize>,
) -> Result<Vec<HiddenFrame>, ProtocolError> {
    let mut provider = super::Provider::new(model, split)?;
    let mut handled = 0usize;
    'outer: loop {
        if let Some(max) = max_requests {
            if handled >= max {
                break;
            }
        }
        let (mut stream, peer) = listener.accept()?;
        stream.set_nodelay(true)?;
        log::info!("connection from {peer}");
        loop {
            let msg = match read_message(&mut stream) {
                Ok(Some(m)) => m,
                Ok(None) => break, // peer closed
                Err(e) => {
                    log::warn!("dropping connection from {peer}: {e}");
                    break;
                }
            };
            let reply = match msg {
                (KIND_HIDDEN, body) => match HiddenFrame::from_bytes(&body) {
                    Ok(frame) => {
                        handled += 1;
                        provider.handle(frame).map(|l| l.to_bytes())
                    }
                    Err(e) => Err(e),
                },
                (kind, _) => Err(ProtocolError::BadKind(kind)),
            };
            match reply {
                Ok(body) => write_message(&mut stream, KIND_LOGITS, &body)?,
                Err(e) => {
                    log::warn!("request failed: {e}");
                    write_message(&mut stream, KIND_ERROR, e.to_string().as_bytes())?;
                }
            }
            if let Some(max) = max_requests {
                if handled >= max {
                    break 'outer;
                }
            }
        }
    }
    Ok(provider.captured)
}

#[cfg(test)]
mod tests {
    use super::super::{InProcess, Provider, UserParty};
    use super::*;
    use crate::defense::NoiseSpec;
    use crate::model::{ModelConfig, TransformerModel};

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

    #[test]
    fn tcp_loopback_matches_in_process_bit_for_bit() {
        let m = model();
        let split = 1usize;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server_model = m.clone();
        let server = std::thread::spawn(move || {
            serve(&listener, &server_model, split, Some(3)).unwrap()
        });

        let user = UserParty::new(&m, split).unwrap();
        let noise = NoiseSpec { sigma: 0.3, seed: 21 };
        let mut tcp = TcpTransport::connect("127.0.0.1", port).unwrap();
        let inputs: [&[u32]; 3] = [&[1, 2, 3], &[7, 7, 7, 7], &[0]];
        let mut tcp_logits = Vec::new();
        for ids in inputs {
            tcp_logits.push(user.infer(&mut tcp, ids, &noise).unwrap());
        }
        drop(tcp);
        let captured_remote = server.join().unwrap();

        // replay in-process with the identical noise spec
        let mut provider = Provider::new(&m, split).unwrap();
        for (ids, remote) in inputs.iter().zip(&tcp_logits) {
            let mut tp = InProcess { provider: &mut provider };
            let local = user.infer(&mut tp, ids, &noise).unwrap();
            assert_eq!(local.data, remote.data, "TCP and in-process logits differ");
        }
        // both providers captured identical frames
        assert_eq!(captured_remote.len(), 3);
        for (a, b) in captured_remote.iter().zip(provider.captured()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn server_reports_errors_and_keeps_serving() {
        let m = model();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server_model = m.clone();
        // the bad frame is also counted as a request by the wire layer
        let server = std::thread::spawn(move || {
            serve(&listener, &server_model, 2, Some(2)).unwrap()
        });

        let user = UserParty::new(&m, 1).unwrap(); // wrong split on purpose
        let mut tcp = TcpTransport::connect("127.0.0.1", port).unwrap();
        let noise = NoiseSpec { sigma: 0.0, seed: 0 };
        let err = user.infer(&mut tcp, &[1, 2], &noise).unwrap_err();
        assert!(matches!(err, ProtocolError::Remote(_)), "{err:?}");

        // same connection still works with the right split
        let user2 = UserParty::new(&m, 2).unwrap();
        let logits = user2.infer(&mut tcp, &[1, 2], &noise).unwrap();
        assert_eq!(logits.shape, vec![2, 19]);
        drop(tcp);
        server.join().unwrap();
    }

    #[test]
    fn read_message_rejects_bad_magic() {
        let mut data: &[u8] = b"BADMAGIC\x01\x00\x00\x00\x00";
        assert!(matches!(
            read_message(&mut data),
            Err(ProtocolError::BadMagic { .. })
        ));
    }

    #[test]
    fn read_message_eof_at_boundary_is_none() {
        let mut data: &[u8] = b"";
        assert!(read_message(&mut data).unwrap().is_none());
    }
}
