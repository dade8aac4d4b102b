//! Marker wire frame.
//!
//! ```text
//! ,-----+------+---------+-------+-----------+-------+-----,
//! | STX | CODE | SEQ     | FLAGS | TS        | CKSUM | ETX |
//! | 1   | 1    | 2 (BE)  | 1     | 0 or 4 BE | 1     | 1   |
//! '-----+------+---------+-------+-----------+-------+-----'
//! ```
//!
//! STX = 0x02, ETX = 0x03. FLAGS bit 0 marks a timestamp; other bits must be
//! clear. CKSUM is the XOR of every preceding byte, STX included. Frames are
//! 7 bytes without a timestamp and 11 with one.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

pub const STX: u8 = 0x02;
pub const ETX: u8 = 0x03;
pub const FLAG_TIMESTAMP: u8 = 0x01;
pub const SHORT_FRAME_LEN: usize = 7;
pub const LONG_FRAME_LEN: usize = 11;

/// Bytes needed before the frame length is known (STX through FLAGS).
const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarkerFrame {
    pub code: u8,
    pub seq: u16,
    /// Sender-relative offset from session start.
    pub ts_ms: Option<u32>,
}

impl MarkerFrame {
    pub fn new(code: u8, seq: u16) -> Self {
        Self { code, seq, ts_ms: None }
    }

    pub fn with_timestamp(mut self, ts_ms: u32) -> Self {
        self.ts_ms = Some(ts_ms);
        self
    }

    pub fn encoded_len(&self) -> usize {
        if self.ts_ms.is_some() {
            LONG_FRAME_LEN
        } else {
            SHORT_FRAME_LEN
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("marker code 0 is reserved")]
    ZeroCode,
}

/// An encoded frame held inline.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct FrameBytes {
    buf: [u8; LONG_FRAME_LEN],
    len: usize,
}

impl Deref for FrameBytes {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.buf[..self.len]
    }
}

impl fmt::Debug for FrameBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

pub fn xor_checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_frame(frame: &MarkerFrame) -> Result<FrameBytes, EncodeError> {
    if frame.code == 0 {
        return Err(EncodeError::ZeroCode);
    }
    let mut buf = [0u8; LONG_FRAME_LEN];
    buf[0] = STX;
    buf[1] = frame.code;
    buf[2..4].copy_from_slice(&frame.seq.to_be_bytes());
    let mut len = HEADER_LEN;
    match frame.ts_ms {
        Some(ts) => {
            buf[4] = FLAG_TIMESTAMP;
            buf[5..9].copy_from_slice(&ts.to_be_bytes());
            len += 4;
        }
        None => buf[4] = 0,
    }
    buf[len] = xor_checksum(&buf[..len]);
    buf[len + 1] = ETX;
    Ok(FrameBytes { buf, len: len + 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptReason {
    ZeroCode,
    BadFlags(u8),
    Checksum { expected: u8, found: u8 },
    MissingEtx(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// A frame started at `at` but failed validation. Scanning resumes at `at + 1`.
    #[error("corrupt frame at byte {at}: {reason:?}")]
    Corrupt { at: usize, reason: CorruptReason },
    /// A frame starts at `at` but more bytes are needed to finish it.
    #[error("truncated frame at byte {at}: need {needed} more bytes")]
    Truncated { at: usize, needed: usize },
    /// No start byte anywhere in the input.
    #[error("no frame found")]
    NoFrame,
}

/// Scans to the next STX and decodes one frame.
///
/// On success returns the frame and the bytes consumed, including any
/// skipped prefix.
pub fn decode_frame(stream: &[u8]) -> Result<(MarkerFrame, usize), DecodeError> {
    let at = stream.iter().position(|&b| b == STX).ok_or(DecodeError::NoFrame)?;
    let rest = &stream[at..];
    if rest.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { at, needed: HEADER_LEN - rest.len() });
    }
    let flags = rest[4];
    let len = match flags {
        0 => SHORT_FRAME_LEN,
        FLAG_TIMESTAMP => LONG_FRAME_LEN,
        other => return Err(DecodeError::Corrupt { at, reason: CorruptReason::BadFlags(other) }),
    };
    if rest.len() < len {
        return Err(DecodeError::Truncated { at, needed: len - rest.len() });
    }
    let frame = &rest[..len];
    if frame[1] == 0 {
        return Err(DecodeError::Corrupt { at, reason: CorruptReason::ZeroCode });
    }
    let expected = xor_checksum(&frame[..len - 2]);
    if frame[len - 2] != expected {
        return Err(DecodeError::Corrupt { at, reason: CorruptReason::Checksum { expected, found: frame[len - 2] } });
    }
    if frame[len - 1] != ETX {
        return Err(DecodeError::Corrupt { at, reason: CorruptReason::MissingEtx(frame[len - 1]) });
    }
    let ts_ms = (len == LONG_FRAME_LEN).then(|| u32::from_be_bytes([frame[5], frame[6], frame[7], frame[8]]));
    let decoded = MarkerFrame { code: frame[1], seq: u16::from_be_bytes([frame[2], frame[3]]), ts_ms };
    Ok((decoded, at + len))
}

/// Incremental resynchronizing decoder over a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    corrupt: u64,
    skipped: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next decodable item, or `None` when more input is needed.
    pub fn next_frame(&mut self) -> Option<Result<MarkerFrame, (CorruptReason, usize)>> {
        match decode_frame(&self.buf) {
            Ok((frame, consumed)) => {
                self.skipped += (consumed - frame.encoded_len()) as u64;
                self.buf.drain(..consumed);
                Some(Ok(frame))
            }
            Err(DecodeError::Corrupt { at, reason }) => {
                self.corrupt += 1;
                self.skipped += at as u64;
                self.buf.drain(..=at);
                Some(Err((reason, at)))
            }
            Err(DecodeError::Truncated { at, .. }) => {
                self.skipped += at as u64;
                self.buf.drain(..at);
                None
            }
            Err(DecodeError::NoFrame) => {
                self.skipped += self.buf.len() as u64;
                self.buf.clear();
                None
            }
        }
    }

    /// Drops any partial frame still buffered and returns its length.
    pub fn finish(&mut self) -> usize {
        let n = self.buf.len();
        self.skipped += n as u64;
        self.buf.clear();
        n
    }

    pub fn corrupt_count(&self) -> u64 {
        self.corrupt
    }

    /// Bytes discarded outside any valid or corrupt frame start.
    pub fn skipped_bytes(&self) -> u64 {
        self.skipped
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
