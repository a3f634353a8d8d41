//! Framed binary protocol and the endpoints that carry it.
//!
//! Frame layout, all little-endian:
//!
//! ```text
//! 0  magic 0x53 0x46
//! 2  version (1)
//! 3  tag
//! 4  round    u16
//! 6  client   u16
//! 8  batch    u32
//! 12 payload  u32 length, then the payload bytes
//! ```

mod endpoint;
mod message;

use thiserror::Error;

pub use endpoint::{inproc_pair, tcp_connect, tcp_listen, Channel, CommCounters, Listener, DEFAULT_HIGH_WATER_MARK};
pub use message::{decode_message, encode_message, Body, Control, Message, NamedTensors};

pub const MAGIC: [u8; 2] = [0x53, 0x46];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on a declared payload; larger claims are rejected unread.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Input ends before the frame does; `needed` more bytes are required.
    #[error("need {needed} more bytes")]
    NeedMoreData { needed: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    /// The peer closed the connection.
    #[error("connection closed")]
    Closed,
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

pub(crate) fn protocol(msg: impl Into<String>) -> TransportError {
    TransportError::Protocol(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Activation = 1,
    ServerOutput = 2,
    OutputGrad = 3,
    ActivationGrad = 4,
    WeightsUpload = 5,
    GlobalWeights = 6,
    Control = 7,
}

impl Tag {
    pub const ALL: [Tag; 7] =
        [Tag::Activation, Tag::ServerOutput, Tag::OutputGrad, Tag::ActivationGrad, Tag::WeightsUpload, Tag::GlobalWeights, Tag::Control];

    pub fn from_code(code: u8) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| *t as u8 == code)
    }

    /// Tags whose payload is a plain tensor list.
    pub fn carries_tensor_list(self) -> bool {
        matches!(self, Tag::Activation | Tag::ServerOutput | Tag::OutputGrad | Tag::ActivationGrad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub round: u16,
    pub client: u16,
    pub batch: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    let len = u32::try_from(frame.payload.len()).map_err(|_| protocol(format!("payload of {} bytes exceeds u32", frame.payload.len())))?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.tag as u8);
    out.extend_from_slice(&frame.round.to_le_bytes());
    out.extend_from_slice(&frame.client.to_le_bytes());
    out.extend_from_slice(&frame.batch.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Parsed header fields: `(tag, round, client, batch, payload_len)`.
pub(crate) fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(Tag, u16, u16, u32, usize)> {
    if h[..2] != MAGIC {
        return Err(protocol(format!("bad magic {:02x} {:02x}", h[0], h[1])));
    }
    if h[2] != VERSION {
        return Err(protocol(format!("unsupported version {}", h[2])));
    }
    let tag = Tag::from_code(h[3]).ok_or_else(|| protocol(format!("unknown tag {}", h[3])))?;
    let round = u16::from_le_bytes([h[4], h[5]]);
    let client = u16::from_le_bytes([h[6], h[7]]);
    let batch = u32::from_le_bytes([h[8], h[9], h[10], h[11]]);
    let len = u32::from_le_bytes([h[12], h[13], h[14], h[15]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(protocol(format!("declared payload of {len} bytes exceeds the {MAX_PAYLOAD}-byte limit")));
    }
    Ok((tag, round, client, batch, len))
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    if bytes.len() < HEADER_LEN {
        // Reject garbage early even when the header is incomplete.
        if bytes.len() >= 2 && bytes[..2] != MAGIC {
            return Err(protocol("bad magic"));
        }
        return Err(TransportError::NeedMoreData { needed: HEADER_LEN - bytes.len() });
    }
    let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("length checked");
    let (tag, round, client, batch, len) = decode_header(header)?;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(TransportError::NeedMoreData { needed: total - bytes.len() });
    }
    Ok((Frame { tag, round, client, batch, payload: bytes[HEADER_LEN..total].to_vec() }, total))
}
