use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Protocol,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Aborted,
}

/// One dispatched marker. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedEvent {
    pub seq: u64,
    pub scheduled_ms: u64,
    pub actual_ms: u64,
    pub marker: u8,
    pub origin: Origin,
    /// `actual_ms > scheduled_ms`.
    pub late: bool,
}

impl RecordedEvent {
    pub fn drift_ms(&self) -> i64 {
        self.actual_ms as i64 - self.scheduled_ms as i64
    }
}

/// Receives events as a session dispatches them.
pub trait EventRecorder {
    fn record(&mut self, event: RecordedEvent);
}

impl EventRecorder for Vec<RecordedEvent> {
    fn record(&mut self, event: RecordedEvent) {
        self.push(event);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: String, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionRecord {
    pub strategy: Strategy,
    pub outcome: Outcome,
    pub events: Vec<RecordedEvent>,
    /// Sink failure that ended the session, if any.
    pub failure: Option<String>,
}

impl ExecutionRecord {
    pub const CSV_HEADER: &'static str = "seq,scheduled_ms,actual_ms,marker,origin,late";

    pub fn protocol_events(&self) -> impl Iterator<Item = &RecordedEvent> {
        self.events.iter().filter(|e| e.origin == Origin::Protocol)
    }

    /// Drift of the final protocol event.
    pub fn end_drift_ms(&self) -> Option<i64> {
        self.protocol_events().last().map(RecordedEvent::drift_ms)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), RecordError> {
        write_events_csv(&self.events, w)
    }
}

/// Writes each event as a CSV row and flushes it immediately, so an
/// interrupted run still leaves every dispatched event on disk.
pub struct CsvEventWriter<W: Write> {
    writer: csv::Writer<W>,
    count: usize,
    error: Option<csv::Error>,
}

impl<W: Write> CsvEventWriter<W> {
    pub fn new(w: W) -> Result<Self, RecordError> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        writer.write_record(ExecutionRecord::CSV_HEADER.split(','))?;
        writer.flush()?;
        Ok(Self { writer, count: 0, error: None })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// First write error, if any row failed.
    pub fn finish(mut self) -> Result<usize, RecordError> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.writer.flush()?;
        Ok(self.count)
    }
}

impl<W: Write> EventRecorder for CsvEventWriter<W> {
    fn record(&mut self, event: RecordedEvent) {
        self.count += 1;
        if self.error.is_some() {
            return;
        }
        let result = self.writer.serialize(event).and_then(|()| self.writer.flush().map_err(csv::Error::from));
        if let Err(e) = result {
            self.error = Some(e);
        }
    }
}

pub fn write_events_csv(events: &[RecordedEvent], w: impl Write) -> Result<(), RecordError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    writer.write_record(ExecutionRecord::CSV_HEADER.split(','))?;
    for e in events {
        writer.serialize(e)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_events_csv(r: impl Read) -> Result<Vec<RecordedEvent>, RecordError> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != ExecutionRecord::CSV_HEADER {
        return Err(RecordError::Header { found: header, expected: ExecutionRecord::CSV_HEADER });
    }
    reader.deserialize().map(|row| row.map_err(RecordError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rec = ExecutionRecord {
            strategy: Strategy::Naive,
            outcome: Outcome::Completed,
            events: vec![
                RecordedEvent {
                    seq: 0,
                    scheduled_ms: 0,
                    actual_ms: 0,
                    marker: 1,
                    origin: Origin::Protocol,
                    late: false,
                },
                RecordedEvent {
                    seq: 1,
                    scheduled_ms: 40,
                    actual_ms: 40,
                    marker: 9,
                    origin: Origin::Manual,
                    late: false,
                },
                RecordedEvent {
                    seq: 2,
                    scheduled_ms: 100,
                    actual_ms: 105,
                    marker: 2,
                    origin: Origin::Protocol,
                    late: true,
                },
            ],
            failure: None,
        };
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "seq,scheduled_ms,actual_ms,marker,origin,late\n0,0,0,1,protocol,false\n1,40,40,9,manual,false\n2,100,105,2,protocol,true\n"
        );
        assert_eq!(read_events_csv(text.as_bytes()).unwrap(), rec.events);
        assert_eq!(rec.end_drift_ms(), Some(5));
    }

    #[test]
    fn streaming_writer_matches_batch() {
        let events = [
            RecordedEvent { seq: 0, scheduled_ms: 0, actual_ms: 2, marker: 1, origin: Origin::Protocol, late: true },
            RecordedEvent {
                seq: 1,
                scheduled_ms: 100,
                actual_ms: 100,
                marker: 2,
                origin: Origin::Protocol,
                late: false,
            },
        ];
        let mut batch = Vec::new();
        write_events_csv(&events, &mut batch).unwrap();
        let mut streamed = Vec::new();
        let mut w = CsvEventWriter::new(&mut streamed).unwrap();
        for e in events {
            w.record(e);
        }
        assert_eq!(w.finish().unwrap(), 2);
        assert_eq!(streamed, batch);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(matches!(read_events_csv("recv_ms,code,seq\n1,2,3\n".as_bytes()), Err(RecordError::Header { .. })));
    }
}
