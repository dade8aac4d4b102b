//! Single-host experiment orchestration.
//!
//! - [`protocol`]: block-design protocol model, text format and expected timeline.
//! - [`scheduler`]: runs a protocol against a clock and a marker sink, with
//!   either sequential sleeps or absolute deadlines.
//! - [`transport`]: the marker wire frame and the sinks that carry it.
//! - [`acquisition`]: a simulated acquisition host that receives frames and
//!   produces a marker-annotated sample series.
//! - [`verify`]: timeline comparison, jitter/drift statistics and
//!   cumulative-time curves.

pub mod acquisition;
pub mod protocol;
pub mod scheduler;
pub mod transport;
pub mod verify;

pub use protocol::{
    expand, expected_timeline, parse_protocol, serialize_protocol, ExpectedTimeline, Protocol, ProtocolSpec,
};
pub use scheduler::{run_deadline, run_naive, ExecutionRecord, Strategy};
pub use transport::{decode_frame, encode_frame, MarkerFrame, MarkerSink};
pub use verify::{compare, cumulative_curve, TimingReport};
