//! Adapter wire protocol.
//!
//! Every frame is `[u32 payload_length][u8 msg_type][payload]`, integers
//! unsigned little-endian, floats `f32` little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_INFER_REQ: u8 = 0x02;
pub const MSG_INFER_RESP: u8 = 0x03;
pub const MSG_SHUTDOWN: u8 = 0xFF;

/// Upper bound on a single payload (1 GiB).
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("stream closed")]
    Eof,
    #[error("stream closed mid-frame")]
    TruncatedFrame,
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub num_classes: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl Hello {
    pub fn image_len(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    /// `batch` images, sample-major then channel-major.
    InferRequest { batch: u32, data: Vec<f32> },
    /// `batch` logit vectors.
    InferResponse { batch: u32, data: Vec<f32> },
    Shutdown,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello(_) => MSG_HELLO,
            Message::InferRequest { .. } => MSG_INFER_REQ,
            Message::InferResponse { .. } => MSG_INFER_RESP,
            Message::Shutdown => MSG_SHUTDOWN,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Message::Hello(h) => [h.num_classes, h.channels, h.height, h.width]
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            Message::InferRequest { batch, data } | Message::InferResponse { batch, data } => {
                let mut out = Vec::with_capacity(4 + 4 * data.len());
                out.extend_from_slice(&batch.to_le_bytes());
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            Message::Shutdown => Vec::new(),
        }
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    let payload = msg.payload();
    let mut frame = Vec::with_capacity(5 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.push(msg.type_byte());
    frame.extend_from_slice(&payload);
    w.write_all(&frame)?;
    w.flush()
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn decode_batch(kind: &'static str, payload: &[u8]) -> Result<(u32, Vec<f32>), WireError> {
    if payload.len() < 4 || (payload.len() - 4) % 4 != 0 {
        return Err(WireError::Malformed {
            kind,
            reason: format!("payload length {} is not 4 + 4k", payload.len()),
        });
    }
    let batch = u32_at(payload, 0);
    let data = payload[4..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok((batch, data))
}

/// Read one frame. A clean end of stream before the first byte is `Eof`.
pub fn read_message(r: &mut impl Read) -> Result<Message, WireError> {
    let mut header = [0u8; 5];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Eof),
            Ok(0) => return Err(WireError::TruncatedFrame),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32_at(&header, 0);
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::TruncatedFrame,
        _ => WireError::Io(e),
    })?;
    match header[4] {
        MSG_HELLO => {
            if payload.len() != 16 {
                return Err(WireError::Malformed {
                    kind: "HELLO",
                    reason: format!("expected 16 bytes, got {}", payload.len()),
                });
            }
            Ok(Message::Hello(Hello {
                num_classes: u32_at(&payload, 0),
                channels: u32_at(&payload, 4),
                height: u32_at(&payload, 8),
                width: u32_at(&payload, 12),
            }))
        }
        MSG_INFER_REQ => {
            let (batch, data) = decode_batch("INFER_REQ", &payload)?;
            Ok(Message::InferRequest { batch, data })
        }
        MSG_INFER_RESP => {
            let (batch, data) = decode_batch("INFER_RESP", &payload)?;
            Ok(Message::InferResponse { batch, data })
        }
        MSG_SHUTDOWN => {
            if !payload.is_empty() {
                return Err(WireError::Malformed {
                    kind: "SHUTDOWN",
                    reason: "payload must be empty".into(),
                });
            }
            Ok(Message::Shutdown)
        }
        other => Err(WireError::UnknownType(other)),
    }
}
