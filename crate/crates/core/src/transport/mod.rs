//! Marker framing and delivery.
//!
//! A [`Transmitter`] stamps each marker with the next session sequence
//! number and hands the [`MarkerFrame`] to a [`MarkerSink`]. Sinks decide
//! what delivery means: raw frame bytes on a stream, length-delimited
//! frames on a local socket, an emulated key press, or a CSV row.

mod frame;
mod sinks;

pub use frame::{
    decode_frame, encode_frame, xor_checksum, CorruptReason, DecodeError, EncodeError, FrameBytes, FrameDecoder,
    MarkerFrame, ETX, FLAG_TIMESTAMP, LONG_FRAME_LEN, SHORT_FRAME_LEN, STX,
};
pub use sinks::{
    write_delimited, FanOutSink, FileSink, KeyEventSink, KeyInjector, KeyLog, KeyMap, LoopbackSink, MemorySink,
    NullSink, StreamSink,
};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("sink is closed")]
    Closed,
    #[error("no key mapped for marker code {0}")]
    UnmappedCode(u8),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    /// Some fan-out children failed; the others received the frame.
    #[error("partial delivery ({delivered} ok): {}", failures.iter().map(|(s, e)| format!("{s}: {e}")).collect::<Vec<_>>().join("; "))]
    Partial { delivered: usize, failures: Vec<(String, SinkError)> },
}

/// Destination for marker frames. Call order is delivery order.
pub trait MarkerSink: Send {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError>;

    fn close(&mut self) -> Result<(), SinkError> {
        Ok(())
    }

    /// Short human-readable identity, used in failure reports.
    fn describe(&self) -> String;
}

impl<S: MarkerSink + ?Sized> MarkerSink for Box<S> {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        (**self).send(frame)
    }

    fn close(&mut self) -> Result<(), SinkError> {
        (**self).close()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<S: MarkerSink + ?Sized> MarkerSink for &mut S {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        (**self).send(frame)
    }

    fn close(&mut self) -> Result<(), SinkError> {
        (**self).close()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Partial { delivered: usize, failed: Vec<String> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryRecord {
    pub marker: u8,
    pub seq: u16,
    /// Sender offset carried in the frame.
    pub ts_ms: Option<u32>,
    pub status: DeliveryStatus,
}

impl DeliveryRecord {
    pub fn is_delivered(&self) -> bool {
        self.status == DeliveryStatus::Delivered
    }
}

/// Assigns per-session sequence numbers and forwards frames to a sink.
pub struct Transmitter<S> {
    sink: S,
    next_seq: u16,
}

impl<S: MarkerSink> Transmitter<S> {
    pub fn new(sink: S) -> Self {
        Self { sink, next_seq: 0 }
    }

    pub fn next_seq(&self) -> u16 {
        self.next_seq
    }

    /// Sends `code` with the next sequence number. The sequence advances
    /// even when delivery fails so retries are distinguishable downstream.
    pub fn send_via(&mut self, code: u8, ts_ms: Option<u32>) -> DeliveryRecord {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        let frame = MarkerFrame { code, seq, ts_ms };
        let status = if code == 0 {
            DeliveryStatus::Failed { error: EncodeError::ZeroCode.to_string() }
        } else {
            match self.sink.send(&frame) {
                Ok(()) => DeliveryStatus::Delivered,
                Err(SinkError::Partial { delivered, failures }) => DeliveryStatus::Partial {
                    delivered,
                    failed: failures.into_iter().map(|(s, e)| format!("{s}: {e}")).collect(),
                },
                Err(e) => DeliveryStatus::Failed { error: e.to_string() },
            }
        };
        DeliveryRecord { marker: code, seq, ts_ms, status }
    }

    pub fn close(&mut self) -> Result<(), SinkError> {
        self.sink.close()
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn into_inner(self) -> S {
        self.sink
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_wraps() {
        let sink = MemorySink::new();
        let mut tx = Transmitter::new(sink.clone());
        tx.next_seq = u16::MAX;
        assert_eq!(tx.send_via(1, None).seq, u16::MAX);
        assert_eq!(tx.send_via(1, None).seq, 0);
        let seqs: Vec<u16> = sink.frames().iter().map(|f| f.seq).collect();
        assert_eq!(seqs, [u16::MAX, 0]);
    }

    #[test]
    fn zero_code_fails_without_touching_sink() {
        let sink = MemorySink::new();
        let mut tx = Transmitter::new(sink.clone());
        let rec = tx.send_via(0, None);
        assert!(matches!(rec.status, DeliveryStatus::Failed { .. }));
        assert!(sink.frames().is_empty());
    }
}
