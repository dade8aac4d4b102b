//! Timeline comparison and reporting.
//!
//! Events are aligned by position after manual markers are dropped; the
//! designs are strictly sequential, so a marker mismatch at any index is a
//! protocol violation rather than something to match around.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::ReceivedEvent;
use crate::protocol::ExpectedTimeline;
use crate::scheduler::{ExecutionRecord, Origin, RecordedEvent};

/// Tolerance for fake-clock runs.
pub const LOGICAL_TOLERANCE_MS: u64 = 0;
/// Tolerance for real-clock desk runs.
pub const REAL_CLOCK_TOLERANCE_MS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub marker: u8,
    pub at_ms: u64,
}

impl ObservedEvent {
    /// Protocol-origin events of a run, in dispatch order.
    pub fn from_record(events: &[RecordedEvent]) -> Vec<Self> {
        events
            .iter()
            .filter(|e| e.origin == Origin::Protocol)
            .map(|e| Self { marker: e.marker, at_ms: e.actual_ms })
            .collect()
    }

    pub fn from_received(events: &[ReceivedEvent]) -> Vec<Self> {
        events.iter().map(|e| Self { marker: e.frame.code, at_ms: e.recv_offset_ms }).collect()
    }

    pub fn from_timeline(t: &ExpectedTimeline) -> Vec<Self> {
        t.events.iter().map(|e| Self { marker: e.marker, at_ms: e.offset_ms }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTiming {
    pub seq: usize,
    pub marker: u8,
    pub expected_ms: u64,
    pub actual_ms: u64,
    /// `actual - expected`.
    pub error_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Equivalent,
    Divergent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    Marker { index: usize, expected: u8, actual: u8 },
    Length { expected: usize, actual: usize },
}

impl Mismatch {
    /// First index at which the sequences disagree.
    pub fn index(&self) -> usize {
        match *self {
            Mismatch::Marker { index, .. } => index,
            Mismatch::Length { expected, actual } => expected.min(actual),
        }
    }
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mismatch::Marker { index, expected, actual } => {
                write!(f, "marker mismatch at index {index}: expected {expected}, got {actual}")
            }
            Mismatch::Length { expected, actual } => {
                write!(f, "length mismatch at index {}: expected {expected} events, got {actual}", self.index())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub per_event: Vec<EventTiming>,
    pub max_abs_jitter_ms: u64,
    pub mean_abs_jitter_ms: f64,
    /// Error of the last aligned event.
    pub end_drift_ms: i64,
    /// Aligned events later than the tolerance allows.
    pub late_count: usize,
    pub tolerance_ms: u64,
    pub verdict: Verdict,
    pub mismatch: Option<Mismatch>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CompareError {
    #[error("{0} timeline is empty")]
    Empty(&'static str),
}

pub fn compare(
    expected: &ExpectedTimeline,
    actual: &[ObservedEvent],
    tol_ms: u64,
) -> Result<TimingReport, CompareError> {
    compare_observed(&ObservedEvent::from_timeline(expected), actual, tol_ms)
}

/// Compares two realized (or one expected and one realized) timelines.
pub fn compare_observed(
    expected: &[ObservedEvent],
    actual: &[ObservedEvent],
    tol_ms: u64,
) -> Result<TimingReport, CompareError> {
    if expected.is_empty() {
        return Err(CompareError::Empty("expected"));
    }
    if actual.is_empty() {
        return Err(CompareError::Empty("actual"));
    }
    let per_event: Vec<EventTiming> = expected
        .iter()
        .zip(actual)
        .enumerate()
        .map(|(seq, (e, a))| EventTiming {
            seq,
            marker: a.marker,
            expected_ms: e.at_ms,
            actual_ms: a.at_ms,
            error_ms: a.at_ms as i64 - e.at_ms as i64,
        })
        .collect();

    let mismatch = expected
        .iter()
        .zip(actual)
        .position(|(e, a)| e.marker != a.marker)
        .map(|index| Mismatch::Marker { index, expected: expected[index].marker, actual: actual[index].marker })
        .or_else(|| {
            (expected.len() != actual.len())
                .then_some(Mismatch::Length { expected: expected.len(), actual: actual.len() })
        });

    let max_abs_jitter_ms = per_event.iter().map(|t| t.error_ms.unsigned_abs()).max().unwrap_or(0);
    let total: u64 = per_event.iter().map(|t| t.error_ms.unsigned_abs()).sum();
    let mean_abs_jitter_ms = total as f64 / per_event.len() as f64;
    let end_drift_ms = per_event.last().map_or(0, |t| t.error_ms);
    let late_count = per_event.iter().filter(|t| t.error_ms > tol_ms as i64).count();
    let verdict =
        if mismatch.is_none() && max_abs_jitter_ms <= tol_ms { Verdict::Equivalent } else { Verdict::Divergent };

    Ok(TimingReport {
        per_event,
        max_abs_jitter_ms,
        mean_abs_jitter_ms,
        end_drift_ms,
        late_count,
        tolerance_ms: tol_ms,
        verdict,
        mismatch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub cumulative_ms: u64,
}

/// Event index against cumulative time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CumulativeCurve {
    pub points: Vec<CurvePoint>,
}

pub fn cumulative_curve(events: &[ObservedEvent]) -> CumulativeCurve {
    CumulativeCurve {
        points: events.iter().enumerate().map(|(k, e)| CurvePoint { k, cumulative_ms: e.at_ms }).collect(),
    }
}

impl CumulativeCurve {
    pub const CSV_HEADER: &'static str = "k,cumulative_ms";

    pub fn of_timeline(t: &ExpectedTimeline) -> Self {
        cumulative_curve(&ObservedEvent::from_timeline(t))
    }

    pub fn of_record(r: &ExecutionRecord) -> Self {
        cumulative_curve(&ObservedEvent::from_record(&r.events))
    }

    pub fn last_ms(&self) -> Option<u64> {
        self.points.last().map(|p| p.cumulative_ms)
    }

    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        writer.write_record(Self::CSV_HEADER.split(','))?;
        for p in &self.points {
            writer.serialize(p)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> csv::Result<Self> {
        let points = csv::Reader::from_reader(r).deserialize().collect::<csv::Result<_>>()?;
        Ok(Self { points })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub curve_expected: PathBuf,
    pub curve_actual: PathBuf,
}

impl TimingReport {
    pub const CSV_HEADER: &'static str = "seq,marker,expected_ms,actual_ms,error_ms";

    pub fn is_equivalent(&self) -> bool {
        self.verdict == Verdict::Equivalent
    }

    /// Per-event rows followed by `summary,KEY,VALUE` footer rows.
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).flexible(true).from_writer(w);
        writer.write_record(Self::CSV_HEADER.split(','))?;
        for t in &self.per_event {
            writer.serialize(t)?;
        }
        let verdict = match self.verdict {
            Verdict::Equivalent => "equivalent",
            Verdict::Divergent => "divergent",
        };
        let mismatch = self.mismatch.map(|m| m.index().to_string()).unwrap_or_default();
        let rows: [(&str, String); 7] = [
            ("max_abs_jitter_ms", self.max_abs_jitter_ms.to_string()),
            ("mean_abs_jitter_ms", format!("{:.3}", self.mean_abs_jitter_ms)),
            ("end_drift_ms", self.end_drift_ms.to_string()),
            ("late_count", self.late_count.to_string()),
            ("tolerance_ms", self.tolerance_ms.to_string()),
            ("verdict", verdict.to_string()),
            ("first_mismatch", mismatch),
        ];
        for (key, value) in rows {
            writer.write_record(["summary", key, &value])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Writes `report.csv`, `curve_expected.csv` and `curve_actual.csv` into `dir`.
pub fn render_report(
    report: &TimingReport,
    expected: &CumulativeCurve,
    actual: &CumulativeCurve,
    dir: &Path,
) -> Result<ReportFiles, RenderError> {
    std::fs::create_dir_all(dir).map_err(|source| RenderError::Io { path: dir.to_path_buf(), source })?;
    let files = ReportFiles {
        report: dir.join("report.csv"),
        curve_expected: dir.join("curve_expected.csv"),
        curve_actual: dir.join("curve_actual.csv"),
    };
    write_file(&files.report, |w| report.write_csv(w))?;
    write_file(&files.curve_expected, |w| expected.write_csv(w))?;
    write_file(&files.curve_actual, |w| actual.write_csv(w))?;
    Ok(files)
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> csv::Result<()>) -> Result<(), RenderError> {
    let file = File::create(path).map_err(|source| RenderError::Io { path: path.to_path_buf(), source })?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|source| RenderError::Csv { path: path.to_path_buf(), source })?;
    w.flush().map_err(|source| RenderError::Io { path: path.to_path_buf(), source })
}
