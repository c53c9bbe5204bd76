//! Framed stream protocol.
//!
//! ```text
//! "INFX" | version u8 = 1 | kind u8 | payload_len u32 LE | payload | crc32(payload) u32 LE
//! ```
//!
//! Payloads (integers little-endian, `str16` = u16 byte length + UTF-8):
//!
//! | kind | name          | payload                                                        |
//! |------|---------------|----------------------------------------------------------------|
//! | 1    | HELLO         | width u16, height u16, frames_per_chunk u16, num_chunks u32, summary str16 |
//! | 2    | FRAME         | chunk u32, frame u16, width u16, height u16, pixels, crc32(pixels) u32 |
//! | 3    | PROMPT_UPDATE | effective_chunk u32, text str16 (at most 4096 bytes)           |
//! | 4    | METRICS       | count u16, then count x (name str16, value f64)                |
//! | 5    | END           | empty                                                          |
//! | 6    | ERROR         | code u16, chunk u32, message str16                             |
//!
//! Kinds 7 to 15 are reserved.

use alloc::string::String;
use alloc::vec::Vec;

pub const MAGIC: [u8; 4] = *b"INFX";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const MAX_PROMPT_BYTES: usize = 4096;

pub const ERR_RETROACTIVE: u16 = 1;
pub const ERR_BAD_MESSAGE: u16 = 2;
pub const ERR_INVALID_PROMPT: u16 = 3;
pub const ERR_INTERNAL: u16 = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("crc mismatch: header says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

impl WireError {
    /// Only truncation can be fixed by waiting for more bytes.
    pub fn is_retriable(&self) -> bool {
        matches!(self, WireError::Truncated { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    Frame = 2,
    PromptUpdate = 3,
    Metrics = 4,
    End = 5,
    Error = 6,
}

impl MessageKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Hello,
            2 => Self::Frame,
            3 => Self::PromptUpdate,
            4 => Self::Metrics,
            5 => Self::End,
            6 => Self::Error,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hello => "HELLO",
            Self::Frame => "FRAME",
            Self::PromptUpdate => "PROMPT_UPDATE",
            Self::Metrics => "METRICS",
            Self::End => "END",
            Self::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub width: u16,
    pub height: u16,
    pub frames_per_chunk: u16,
    pub num_chunks: u32,
    pub summary: String,
}

/// One grayscale frame; the pixel crc is computed on encode and checked on decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePayload {
    pub chunk_index: u32,
    pub frame_index: u16,
    pub width: u16,
    pub height: u16,
    pub pixels: Vec<u8>,
}

impl FramePayload {
    pub fn crc(&self) -> u32 {
        crc32(&self.pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptUpdatePayload {
    pub effective_chunk: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: u16,
    pub chunk: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamMessage {
    Hello(Hello),
    Frame(FramePayload),
    PromptUpdate(PromptUpdatePayload),
    Metrics(Vec<(String, f64)>),
    End,
    Error(ErrorPayload),
}

impl StreamMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Hello(_) => MessageKind::Hello,
            Self::Frame(_) => MessageKind::Frame,
            Self::PromptUpdate(_) => MessageKind::PromptUpdate,
            Self::Metrics(_) => MessageKind::Metrics,
            Self::End => MessageKind::End,
            Self::Error(_) => MessageKind::Error,
        }
    }
}

/// Standard CRC-32 (IEEE 802.3, reflected, init and xorout `0xFFFFFFFF`).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::Malformed("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_payload(msg: &StreamMessage) -> Result<Vec<u8>, WireError> {
    let mut p = Vec::new();
    match msg {
        StreamMessage::Hello(h) => {
            p.extend_from_slice(&h.width.to_le_bytes());
            p.extend_from_slice(&h.height.to_le_bytes());
            p.extend_from_slice(&h.frames_per_chunk.to_le_bytes());
            p.extend_from_slice(&h.num_chunks.to_le_bytes());
            put_str16(&mut p, &h.summary)?;
        }
        StreamMessage::Frame(f) => {
            if f.pixels.len() != usize::from(f.width) * usize::from(f.height) {
                return Err(WireError::Malformed("pixel count does not match width x height"));
            }
            p.reserve(14 + f.pixels.len());
            p.extend_from_slice(&f.chunk_index.to_le_bytes());
            p.extend_from_slice(&f.frame_index.to_le_bytes());
            p.extend_from_slice(&f.width.to_le_bytes());
            p.extend_from_slice(&f.height.to_le_bytes());
            p.extend_from_slice(&f.pixels);
            p.extend_from_slice(&f.crc().to_le_bytes());
        }
        StreamMessage::PromptUpdate(u) => {
            if u.text.len() > MAX_PROMPT_BYTES {
                return Err(WireError::Malformed("prompt text longer than 4096 bytes"));
            }
            p.extend_from_slice(&u.effective_chunk.to_le_bytes());
            put_str16(&mut p, &u.text)?;
        }
        StreamMessage::Metrics(m) => {
            let n = u16::try_from(m.len()).map_err(|_| WireError::Malformed("too many metrics"))?;
            p.extend_from_slice(&n.to_le_bytes());
            for (name, value) in m {
                put_str16(&mut p, name)?;
                p.extend_from_slice(&value.to_le_bytes());
            }
        }
        StreamMessage::End => {}
        StreamMessage::Error(e) => {
            p.extend_from_slice(&e.code.to_le_bytes());
            p.extend_from_slice(&e.chunk.to_le_bytes());
            put_str16(&mut p, &e.message)?;
        }
    }
    if p.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(p.len()));
    }
    Ok(p)
}

/// Wrap an already-encoded payload in header and trailer.
pub fn encode_raw(kind: u8, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32(payload).to_le_bytes());
    Ok(out)
}

pub fn encode_message(msg: &StreamMessage) -> Result<Vec<u8>, WireError> {
    encode_raw(msg.kind() as u8, &encode_payload(msg)?)
}

/// Validate framing and crc without interpreting the payload.
/// Returns `(kind, payload, bytes_consumed)`.
pub fn decode_raw(buf: &[u8]) -> Result<(u8, &[u8], usize), WireError> {
    let prefix = buf.len().min(MAGIC.len());
    if buf[..prefix] != MAGIC[..prefix] {
        return Err(WireError::BadMagic);
    }
    if buf.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            have: buf.len(),
        });
    }
    if buf[4] != VERSION {
        return Err(WireError::BadVersion(buf[4]));
    }
    let kind = buf[5];
    let len = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let total = HEADER_LEN + len + TRAILER_LEN;
    if buf.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: buf.len(),
        });
    }
    let payload = &buf[HEADER_LEN..HEADER_LEN + len];
    let t = &buf[HEADER_LEN + len..total];
    let expected = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
    let actual = crc32(payload);
    if expected != actual {
        return Err(WireError::CrcMismatch { expected, actual });
    }
    Ok((kind, payload, total))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WireError::Malformed("payload shorter than its fields"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str16(&mut self) -> Result<String, WireError> {
        let n = usize::from(self.u16()?);
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(String::from)
            .map_err(|_| WireError::Malformed("invalid UTF-8"))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes in payload"))
        }
    }
}

/// Interpret a payload of the given kind.
pub fn decode_payload(kind: u8, payload: &[u8]) -> Result<StreamMessage, WireError> {
    let kind = MessageKind::from_u8(kind).ok_or(WireError::UnknownKind(kind))?;
    let mut r = Reader { buf: payload, pos: 0 };
    let msg = match kind {
        MessageKind::Hello => StreamMessage::Hello(Hello {
            width: r.u16()?,
            height: r.u16()?,
            frames_per_chunk: r.u16()?,
            num_chunks: r.u32()?,
            summary: r.str16()?,
        }),
        MessageKind::Frame => {
            let chunk_index = r.u32()?;
            let frame_index = r.u16()?;
            let width = r.u16()?;
            let height = r.u16()?;
            let pixels = r.take(usize::from(width) * usize::from(height))?.to_vec();
            let crc = r.u32()?;
            let f = FramePayload {
                chunk_index,
                frame_index,
                width,
                height,
                pixels,
            };
            let actual = f.crc();
            if actual != crc {
                return Err(WireError::CrcMismatch { expected: crc, actual });
            }
            StreamMessage::Frame(f)
        }
        MessageKind::PromptUpdate => {
            let effective_chunk = r.u32()?;
            let text = r.str16()?;
            if text.len() > MAX_PROMPT_BYTES {
                return Err(WireError::Malformed("prompt text longer than 4096 bytes"));
            }
            StreamMessage::PromptUpdate(PromptUpdatePayload { effective_chunk, text })
        }
        MessageKind::Metrics => {
            let n = r.u16()?;
            let mut m = Vec::with_capacity(usize::from(n));
            for _ in 0..n {
                let name = r.str16()?;
                m.push((name, r.f64()?));
            }
            StreamMessage::Metrics(m)
        }
        MessageKind::End => StreamMessage::End,
        MessageKind::Error => StreamMessage::Error(ErrorPayload {
            code: r.u16()?,
            chunk: r.u32()?,
            message: r.str16()?,
        }),
    };
    r.finish()?;
    Ok(msg)
}

/// Decode one message from the front of `buf`; returns it with the bytes consumed.
pub fn decode_message(buf: &[u8]) -> Result<(StreamMessage, usize), WireError> {
    let (kind, payload, used) = decode_raw(buf)?;
    Ok((decode_payload(kind, payload)?, used))
}

/// Reassembles messages from arbitrarily split byte chunks.
#[derive(Debug, Default, Clone)]
pub struct Decoder {
    buf: Vec<u8>,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` means more bytes are needed. After any other error the
    /// stream is out of sync and the decoder should be discarded, except for
    /// [`WireError::UnknownKind`] and payload errors, whose bytes are skipped.
    pub fn next_message(&mut self) -> Result<Option<StreamMessage>, WireError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match decode_raw(&self.buf) {
            Ok((kind, payload, used)) => {
                let res = decode_payload(kind, payload);
                self.buf.drain(..used);
                res.map(Some)
            }
            Err(e) if e.is_retriable() => Ok(None),
            Err(e) => Err(e),
        }
    }
}
