//! Headless subcommands. Each returns the process exit status.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use trigline_core::acquisition::{
    annotate, read_receiver_log, write_receiver_log, ListenStatus, Listener, ListenerConfig, RECEIVER_LOG_HEADER,
};
use trigline_core::protocol::ProtocolError;
use trigline_core::scheduler::{
    read_events_csv, ControlSource, CsvEventWriter, EventRecorder, FakeClock, MonotonicClock, NoControl, Outcome,
    RecordedEvent, Session,
};
use trigline_core::verify::{compare, render_report, CumulativeCurve, ObservedEvent, TimingReport};
use trigline_core::{expand, parse_protocol, ExecutionRecord, Protocol, Strategy};

use crate::sinks::{build_sinks, SinkSpec};
use crate::{exit, CliError};

pub type CommandResult = Result<u8, CliError>;

fn read_source(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: cannot read: {e}", path.display())))
}

/// Parses and expands a protocol file, rendering every diagnostic.
pub fn load_protocol(path: &Path) -> Result<Protocol, CliError> {
    let text = read_source(path)?;
    let spec = parse_protocol(&text).map_err(|diags| {
        let lines: Vec<String> = diags.iter().map(|d| format!("{}:{d}", path.display())).collect();
        CliError::validation(lines.join("\n"))
    })?;
    expand(&spec).map_err(|e| match e {
        ProtocolError::Invalid(diags) => {
            CliError::validation(diags.iter().map(|d| format!("{}:{d}", path.display())).collect::<Vec<_>>().join("\n"))
        }
        ProtocolError::Empty(_) => CliError::validation(format!("{}: {e}", path.display())),
    })
}

pub fn validate(path: &Path) -> CommandResult {
    let p = load_protocol(path)?;
    println!(
        "{}: ok, protocol '{}', {} blocks, {} events, {} ms",
        path.display(),
        p.name(),
        p.blocks().len(),
        p.event_count(),
        p.total_duration_ms()
    );
    Ok(exit::OK)
}

struct Counter(usize);

impl EventRecorder for Counter {
    fn record(&mut self, _event: RecordedEvent) {
        self.0 += 1;
    }
}

pub struct RunOptions {
    pub protocol: PathBuf,
    pub strategy: Strategy,
    pub sinks: Vec<SinkSpec>,
    pub record: Option<PathBuf>,
}

/// Runs a protocol on the real clock. Rows reach the record file as they
/// are dispatched, so an aborted run leaves a partial record behind.
pub fn run(opts: &RunOptions, control: &mut dyn ControlSource) -> CommandResult {
    let protocol = load_protocol(&opts.protocol)?;
    let mut recorder = match &opts.record {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::setup(format!("{}: {e}", path.display())))?;
            Some(CsvEventWriter::new(BufWriter::new(file)).map_err(|e| CliError::setup(e.to_string()))?)
        }
        None => None,
    };
    let mut sink = build_sinks(&opts.sinks, &protocol).map_err(CliError::setup)?;

    let session = Session::new(&protocol, opts.strategy);
    let mut clock = MonotonicClock::new();
    let mut counter = Counter(0);
    let summary = match recorder.as_mut() {
        Some(r) => session.run_into(&mut clock, &mut sink, control, r),
        None => session.run_into(&mut clock, &mut sink, control, &mut counter),
    };
    let close = sink.close();
    let written = recorder.map(|r| r.finish()).transpose().map_err(|e| CliError::setup(format!("record: {e}")))?;

    println!(
        "{}: {} ({} strategy), {} protocol events dispatched{}",
        protocol.name(),
        match summary.outcome {
            Outcome::Completed => "completed",
            Outcome::Aborted => "aborted",
        },
        opts.strategy,
        summary.dispatched,
        written.map(|n| format!(", {n} rows recorded")).unwrap_or_default()
    );
    if let Some(failure) = &summary.failure {
        eprintln!("sink failure: {failure}");
        return Ok(exit::SETUP);
    }
    if let Err(e) = close {
        eprintln!("closing sinks: {e}");
    }
    Ok(match summary.outcome {
        Outcome::Completed => exit::OK,
        Outcome::Aborted => exit::ABORTED,
    })
}

pub struct SimulateOptions {
    pub protocol: PathBuf,
    pub strategy: Strategy,
    pub overhead_ms: u64,
    pub out: PathBuf,
    pub tolerance_ms: u64,
}

fn print_report(report: &TimingReport) {
    println!(
        "verdict {} at tol {} ms: max |jitter| {} ms, mean |jitter| {:.3} ms, end drift {} ms, {} late",
        match report.verdict {
            trigline_core::verify::Verdict::Equivalent => "equivalent",
            trigline_core::verify::Verdict::Divergent => "divergent",
        },
        report.tolerance_ms,
        report.max_abs_jitter_ms,
        report.mean_abs_jitter_ms,
        report.end_drift_ms,
        report.late_count
    );
    if let Some(m) = report.mismatch {
        println!("{m}");
    }
}

fn write_outputs(
    protocol: &Protocol,
    observed: &[ObservedEvent],
    tolerance_ms: u64,
    out: &Path,
) -> Result<TimingReport, CliError> {
    let expected = protocol.expected_timeline();
    let report = compare(&expected, observed, tolerance_ms).map_err(|e| CliError::validation(e.to_string()))?;
    let files = render_report(
        &report,
        &CumulativeCurve::of_timeline(&expected),
        &trigline_core::cumulative_curve(observed),
        out,
    )
    .map_err(|e| CliError::setup(e.to_string()))?;
    print_report(&report);
    println!("wrote {}", files.report.display());
    Ok(report)
}

/// Runs a protocol against a simulated clock charging `overhead_ms` per
/// send, then compares the run with the expected timeline. Reports drift;
/// the verdict does not change the exit status.
pub fn simulate(opts: &SimulateOptions) -> CommandResult {
    let protocol = load_protocol(&opts.protocol)?;
    let mut clock = FakeClock::new(opts.overhead_ms);
    let mut sink = trigline_core::transport::NullSink::default();
    let record = Session::new(&protocol, opts.strategy).run(&mut clock, &mut sink, &mut NoControl);
    fs::create_dir_all(&opts.out).map_err(|e| CliError::setup(format!("{}: {e}", opts.out.display())))?;
    write_record(&record, &opts.out.join("record.csv"))?;
    println!(
        "{}: simulated {} events, {} strategy, {} ms overhead per send",
        protocol.name(),
        record.events.len(),
        opts.strategy,
        opts.overhead_ms
    );
    write_outputs(&protocol, &ObservedEvent::from_record(&record.events), opts.tolerance_ms, &opts.out)?;
    Ok(exit::OK)
}

fn write_record(record: &ExecutionRecord, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::setup(format!("{}: {e}", path.display())))?;
    record.write_csv(BufWriter::new(file)).map_err(|e| CliError::setup(format!("{}: {e}", path.display())))
}

/// An observed run: an execution record or a receiver log, told apart by
/// header.
pub fn read_observed(path: &Path) -> Result<Vec<ObservedEvent>, CliError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_string(&mut text))
        .map_err(|e| CliError::validation(format!("{}: cannot read: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or_default().trim_end_matches('\r');
    let bad = |e: String| CliError::validation(format!("{}: {e}", path.display()));
    if header == RECEIVER_LOG_HEADER {
        let events = read_receiver_log(text.as_bytes()).map_err(|e| bad(e.to_string()))?;
        Ok(ObservedEvent::from_received(&events))
    } else {
        let events = read_events_csv(text.as_bytes()).map_err(|e| bad(e.to_string()))?;
        Ok(ObservedEvent::from_record(&events))
    }
}

pub struct VerifyOptions {
    pub protocol: PathBuf,
    pub actual: PathBuf,
    pub tolerance_ms: u64,
    pub out: PathBuf,
}

pub fn verify(opts: &VerifyOptions) -> CommandResult {
    let protocol = load_protocol(&opts.protocol)?;
    let observed = read_observed(&opts.actual)?;
    let report = write_outputs(&protocol, &observed, opts.tolerance_ms, &opts.out)?;
    Ok(if report.is_equivalent() { exit::OK } else { exit::DIVERGENT })
}

pub struct ListenOptions {
    pub bind: SocketAddr,
    pub sample_rate_hz: f64,
    pub duration_ms: Option<u64>,
    pub protocol: Option<PathBuf>,
    pub accept_timeout: Duration,
    pub idle_timeout: Option<Duration>,
    pub out: PathBuf,
}

/// Receives one sender's markers and writes `receiver_log.csv` and
/// `series.csv`. The first stdout line names the bound address.
pub fn listen(opts: &ListenOptions) -> CommandResult {
    if !(opts.sample_rate_hz > 0.0 && opts.sample_rate_hz.is_finite()) {
        return Err(CliError::validation(format!("sample rate must be positive, got {}", opts.sample_rate_hz)));
    }
    let duration_ms = match (opts.duration_ms, &opts.protocol) {
        (Some(d), _) => Some(d),
        (None, Some(p)) => Some(load_protocol(p)?.total_duration_ms()),
        (None, None) => None,
    };
    fs::create_dir_all(&opts.out).map_err(|e| CliError::setup(format!("{}: {e}", opts.out.display())))?;
    let listener = Listener::bind(opts.bind).map_err(|e| CliError::setup(format!("bind {}: {e}", opts.bind)))?;
    let addr = listener.local_addr().map_err(|e| CliError::setup(e.to_string()))?;
    println!("listening on {addr}");
    let config = ListenerConfig { accept_timeout: opts.accept_timeout, idle_timeout: opts.idle_timeout };
    let session = listener.run(&config).map_err(|e| CliError::setup(format!("receive: {e}")))?;
    if session.status == ListenStatus::AcceptTimeout {
        eprintln!("no sender connected within {:?}", opts.accept_timeout);
        return Ok(exit::SETUP);
    }

    let duration_ms = duration_ms.unwrap_or_else(|| session.events.last().map_or(0, |e| e.recv_offset_ms + 1));
    let series = annotate(&session.events, opts.sample_rate_hz, duration_ms);
    let log_path = opts.out.join("receiver_log.csv");
    let series_path = opts.out.join("series.csv");
    let io_err = |p: &Path, e: String| CliError::setup(format!("{}: {e}", p.display()));
    let log = File::create(&log_path).map_err(|e| io_err(&log_path, e.to_string()))?;
    write_receiver_log(&session.events, BufWriter::new(log)).map_err(|e| io_err(&log_path, e.to_string()))?;
    let file = File::create(&series_path).map_err(|e| io_err(&series_path, e.to_string()))?;
    series.write_csv(BufWriter::new(file)).map_err(|e| io_err(&series_path, e.to_string()))?;

    println!(
        "received {} markers ({} corrupt messages, {} stray bytes); {} rows at {} Hz, markers at rows {:?}",
        session.events.len(),
        session.corrupt_frames,
        session.discarded_bytes,
        series.samples.len(),
        opts.sample_rate_hz,
        series.marker_rows().iter().map(|(row, _)| *row).collect::<Vec<_>>()
    );
    for c in &series.conflicts {
        eprintln!(
            "row {}: marker {} at {} ms dropped, row already holds {}",
            c.row, c.dropped, c.dropped_offset_ms, c.kept
        );
    }
    if session.status == ListenStatus::IdleTimeout {
        eprintln!("sender went idle; stopped early");
    }
    Ok(exit::OK)
}
