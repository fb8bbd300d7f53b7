//! Framed wire messages.
//!
//! On a stream every message is prefixed by its length as a big-endian
//! `u32`. The message itself is
//!
//! ```text
//! kind u8 | round_index u32 | payload_len u32 | payload | crc32c u32
//! ```
//!
//! with big-endian header integers and the CRC over everything before it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::blob::{decode_params, encode_params};
use crate::error::TransportError;
use crate::params::ParamSet;
use crate::trainer::ClientUpdate;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 30;
const HEADER_LEN: usize = 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Hello = 1,
    GlobalParams = 2,
    ClientUpdate = 3,
    EvalReport = 4,
    Stop = 5,
}

impl MessageKind {
    fn from_u8(b: u8) -> Result<Self, TransportError> {
        Ok(match b {
            1 => Self::Hello,
            2 => Self::GlobalParams,
            3 => Self::ClientUpdate,
            4 => Self::EvalReport,
            5 => Self::Stop,
            other => return Err(TransportError::Malformed(format!("unknown message kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round_index: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round_index.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32c::crc32c(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(TransportError::Truncated);
        }
        let payload_len = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + payload_len + 4;
        if bytes.len() < expected {
            return Err(TransportError::Truncated);
        }
        if bytes.len() > expected {
            return Err(TransportError::Malformed("payload length does not match header".into()));
        }
        let body_end = HEADER_LEN + payload_len;
        let stored = u32::from_be_bytes(bytes[body_end..].try_into().unwrap());
        if crc32c::crc32c(&bytes[..body_end]) != stored {
            return Err(TransportError::BadCrc);
        }
        Ok(Self {
            kind: MessageKind::from_u8(bytes[0])?,
            round_index: u32::from_be_bytes(bytes[1..5].try_into().unwrap()),
            payload: bytes[HEADER_LEN..body_end].to_vec(),
        })
    }

    /// Length-prefixed encoding, as written to a stream.
    pub fn to_frame(&self) -> Vec<u8> {
        let body = self.encode();
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }
}

pub fn write_frame(w: &mut impl Write, msg: &WireMessage) -> Result<(), TransportError> {
    w.write_all(&msg.to_frame())?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<WireMessage, TransportError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(TransportError::Disconnected),
        other => other?,
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::Malformed(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::Truncated,
        _ => TransportError::Io(e),
    })?;
    WireMessage::decode(&body)
}

/// Split a byte string of concatenated frames into messages.
pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<WireMessage>, TransportError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        out.push(read_frame(&mut bytes).map_err(|e| match e {
            TransportError::Disconnected => TransportError::Truncated,
            e => e,
        })?);
    }
    Ok(out)
}

/// Per-round evaluation broadcast to clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub metric: f64,
}

/// Decoded message contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: usize },
    GlobalParams(ParamSet),
    ClientUpdate(ClientUpdate),
    EvalReport(RoundReport),
    Stop { reason: String },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::GlobalParams(_) => MessageKind::GlobalParams,
            Message::ClientUpdate(_) => MessageKind::ClientUpdate,
            Message::EvalReport(_) => MessageKind::EvalReport,
            Message::Stop { .. } => MessageKind::Stop,
        }
    }

    pub fn to_wire(&self, round_index: usize) -> WireMessage {
        let payload = match self {
            Message::Hello { client_id } => (*client_id as u32).to_be_bytes().to_vec(),
            Message::GlobalParams(p) => encode_params(p),
            Message::ClientUpdate(u) => {
                let mut out = Vec::new();
                out.extend_from_slice(&(u.client_id as u32).to_be_bytes());
                out.extend_from_slice(&(u.sample_count as u64).to_be_bytes());
                out.extend_from_slice(&u.final_train_loss.to_bits().to_be_bytes());
                out.extend_from_slice(&encode_params(&u.params));
                out
            }
            Message::EvalReport(r) => serde_json::to_vec(r).expect("report serializes"),
            Message::Stop { reason } => reason.as_bytes().to_vec(),
        };
        WireMessage {
            kind: self.kind(),
            round_index: round_index as u32,
            payload,
        }
    }

    pub fn from_wire(msg: &WireMessage) -> Result<Self, TransportError> {
        let p = &msg.payload;
        let short = || TransportError::Malformed(format!("{:?} payload too short", msg.kind));
        Ok(match msg.kind {
            MessageKind::Hello => {
                let id: [u8; 4] = p.as_slice().try_into().map_err(|_| short())?;
                Message::Hello {
                    client_id: u32::from_be_bytes(id) as usize,
                }
            }
            MessageKind::GlobalParams => Message::GlobalParams(decode_params(p)?),
            MessageKind::ClientUpdate => {
                if p.len() < 20 {
                    return Err(short());
                }
                Message::ClientUpdate(ClientUpdate {
                    client_id: u32::from_be_bytes(p[0..4].try_into().unwrap()) as usize,
                    sample_count: u64::from_be_bytes(p[4..12].try_into().unwrap()) as usize,
                    final_train_loss: f64::from_bits(u64::from_be_bytes(p[12..20].try_into().unwrap())),
                    params: decode_params(&p[20..])?,
                })
            }
            MessageKind::EvalReport => Message::EvalReport(
                serde_json::from_slice(p).map_err(|e| TransportError::Malformed(e.to_string()))?,
            ),
            MessageKind::Stop => Message::Stop {
                reason: String::from_utf8(p.clone()).map_err(|_| TransportError::Malformed("stop reason".into()))?,
            },
        })
    }
}
