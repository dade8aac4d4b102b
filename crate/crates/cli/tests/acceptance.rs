//! Acceptance criteria, one line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the result lines always
//! print. Exits non-zero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigline_core::protocol::{Block, Item, MarkerCode, ProtocolSpec};
use trigline_core::scheduler::{EventRecorder, FakeClock, MonotonicClock, NoControl, Outcome, RecordedEvent, Session};
use trigline_core::transport::{decode_frame, encode_frame, FileSink, FrameDecoder, MarkerFrame, NullSink};
use trigline_core::verify::{compare, ObservedEvent};
use trigline_core::{expand, parse_protocol, serialize_protocol, Protocol, Strategy};

// Pinned tolerances and budgets.
const LOGICAL_TOL_MS: u64 = 0;
const DESK_TOL_MS: u64 = 50;
const LOOPBACK_TOL_MS: u64 = 50;
const OVERHEAD_MS: u64 = 5;
const DEADLINE_DRIFT_BOUND_MS: i64 = 5;
const CODEC_ROUND_TRIPS: usize = 10_000;
const CODEC_RANDOM_BYTES: usize = 1_000_000;
const PARSER_ROUND_TRIPS: usize = 1_000;
/// Allowed spread of scheduler auxiliary memory across the size sweep.
const MEMORY_NOISE_BYTES: usize = 64;
const SEED: u64 = 20_241_014;

// Per-thread allocation accounting: only the measuring thread counts.
thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static ALLOCS: Cell<usize> = const { Cell::new(0) };
}

struct Counting;

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        track(layout.size() as isize, true);
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        track(-(layout.size() as isize), false);
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        track(new_size as isize - layout.size() as isize, true);
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

fn track(delta: isize, is_alloc: bool) {
    let _ = TRACKING.try_with(|t| {
        if t.get() {
            LIVE.with(|l| {
                let now = l.get() + delta;
                l.set(now);
                PEAK.with(|p| p.set(p.get().max(now)));
            });
            if is_alloc {
                ALLOCS.with(|a| a.set(a.get() + 1));
            }
        }
    });
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Peak bytes and allocation count while `f` runs on this thread.
fn measure<T>(f: impl FnOnce() -> T) -> (T, usize, usize) {
    LIVE.with(|l| l.set(0));
    PEAK.with(|p| p.set(0));
    ALLOCS.with(|a| a.set(0));
    TRACKING.with(|t| t.set(true));
    let out = f();
    TRACKING.with(|t| t.set(false));
    (out, PEAK.with(Cell::get) as usize, ALLOCS.with(Cell::get))
}

type Checked = Result<String, String>;
type Criterion = (&'static str, fn() -> Checked);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn protocol(text: &str) -> Protocol {
    expand(&parse_protocol(text).expect("parses")).expect("expands")
}

fn repo_protocol(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../protocols").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trigline"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn within(started: Instant, budget: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    check(took < budget, || format!("took {took:?}, budget {budget:?}"))?;
    Ok(took)
}

/// Zero-overhead simulation of alternating rest and quiz periods: both
/// strategies equivalent at tolerance 0 and the two curve files identical.
fn cumulative_curve_reproduction() -> Checked {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let proto = repo_protocol("rest_quiz.proto");
    let mut notes = Vec::new();
    for strategy in ["naive", "deadline"] {
        let out = dir.path().join(strategy);
        let o = bin()
            .args(["simulate", s(&proto), "--strategy", strategy, "--overhead-ms", "0", "--tol"])
            .arg(LOGICAL_TOL_MS.to_string())
            .args(["--out", s(&out)])
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&o.stdout);
        check(o.status.success(), || format!("{strategy}: exit {:?}", o.status.code()))?;
        check(stdout.contains("verdict equivalent"), || format!("{strategy}: {stdout}"))?;
        let expected = fs::read(out.join("curve_expected.csv")).map_err(|e| e.to_string())?;
        let actual = fs::read(out.join("curve_actual.csv")).map_err(|e| e.to_string())?;
        check(expected == actual, || format!("{strategy}: curve files differ"))?;
        // Independent check of the curve itself: onsets every 20 s.
        let text = String::from_utf8(expected).unwrap();
        let oracle: String = (0..10).map(|k| format!("{k},{}\n", k * 20_000)).collect();
        check(text == format!("k,cumulative_ms\n{oracle}"), || format!("{strategy}: curve {text}"))?;
        notes.push(format!("{strategy} equivalent"));
    }
    let took = within(started, Duration::from_secs(1))?;
    Ok(format!("{}, curves byte-identical, {took:.0?}", notes.join(", ")))
}

/// Fake clock charging 5 ms per send, 10 onsets of 100 ms.
fn drift_laws() -> Checked {
    let started = Instant::now();
    let p = protocol("protocol d\nmarker A=1\nrepeat 10 { block rest A 100ms }\n");
    let n = p.event_count() as i64;
    let oracle_naive = (n - 1) * OVERHEAD_MS as i64;
    let naive = Session::new(&p, Strategy::Naive).run(
        &mut FakeClock::new(OVERHEAD_MS),
        &mut NullSink::default(),
        &mut NoControl,
    );
    let deadline = Session::new(&p, Strategy::Deadline).run(
        &mut FakeClock::new(OVERHEAD_MS),
        &mut NullSink::default(),
        &mut NoControl,
    );
    let dn = naive.end_drift_ms().ok_or("naive run empty")?;
    let dd = deadline.end_drift_ms().ok_or("deadline run empty")?;
    check(dn == oracle_naive && oracle_naive == 45, || format!("naive end drift {dn}, oracle {oracle_naive}"))?;
    check(dd.abs() <= DEADLINE_DRIFT_BOUND_MS, || format!("deadline end drift {dd}"))?;
    let took = within(started, Duration::from_secs(1))?;
    Ok(format!("naive end drift {dn} ms (oracle {oracle_naive}), deadline {dd} ms, {took:.0?}"))
}

fn desk_run(p: &Protocol, strategy: Strategy, dir: &Path) -> Result<(i64, u64), String> {
    let mut sink = FileSink::create(dir.join(format!("{strategy}.csv"))).map_err(|e| e.to_string())?;
    let record = Session::new(p, strategy).run(&mut MonotonicClock::new(), &mut sink, &mut NoControl);
    check(record.outcome == Outcome::Completed, || format!("{strategy}: {:?}", record.failure))?;
    let report = compare(&p.expected_timeline(), &ObservedEvent::from_record(&record.events), DESK_TOL_MS)
        .map_err(|e| e.to_string())?;
    Ok((report.end_drift_ms, report.max_abs_jitter_ms))
}

/// 60 real-clock blocks of 100 ms through a file sink.
fn real_clock_desk_run() -> Checked {
    let p = protocol(
        "protocol desk\nmarker REST=1\nmarker QUIZ=2\nrepeat 30 {\n block rest REST 100ms\n block quiz QUIZ 100ms\n}\n",
    );
    check(p.blocks().len() == 60, || "protocol shape".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let (dd, jd) = desk_run(&p, Strategy::Deadline, dir.path())?;
    let (dn, jn) = desk_run(&p, Strategy::Naive, dir.path())?;
    let line = format!(
        "deadline max|jitter| {jd} ms end drift {dd} ms; naive max|jitter| {jn} ms end drift {dn} ms; {:.1?}",
        started.elapsed()
    );
    check(jd <= DESK_TOL_MS && dd.unsigned_abs() <= DESK_TOL_MS, || line.clone())?;
    check(dn >= dd, || format!("naive drift below deadline: {line}"))?;
    Ok(line)
}

fn random_frame(rng: &mut ChaCha8Rng) -> MarkerFrame {
    let f = MarkerFrame::new(rng.random_range(1..=255), rng.random());
    if rng.random() {
        f.with_timestamp(rng.random())
    } else {
        f
    }
}

/// Round trips, exhaustive single-bit corruption, and random garbage.
fn codec() -> Checked {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for i in 0..CODEC_ROUND_TRIPS {
        let f = random_frame(&mut rng);
        let bytes = encode_frame(&f).map_err(|e| e.to_string())?;
        let got = decode_frame(&bytes);
        check(got == Ok((f, bytes.len())), || format!("round trip {i}: {f:?} -> {got:?}"))?;
    }

    let fixed = encode_frame(&MarkerFrame::new(2, 1).with_timestamp(70_000)).map_err(|e| e.to_string())?;
    let expected_bytes = [0x02, 0x02, 0x00, 0x01, 0x01, 0x00, 0x01, 0x11, 0x70, 0x60, 0x03];
    check(*fixed == expected_bytes, || format!("fixed frame bytes {:02x?}", &*fixed))?;
    let mut flips = 0;
    for byte in 0..fixed.len() {
        for bit in 0..8 {
            let mut bad = fixed.to_vec();
            bad[byte] ^= 1 << bit;
            let mut d = FrameDecoder::new();
            d.push(&bad);
            while let Some(item) = d.next_frame() {
                check(item.is_err(), || format!("flip byte {byte} bit {bit} decoded as {item:?}"))?;
            }
            d.finish();
            flips += 1;
        }
    }

    let mut garbage = vec![0u8; CODEC_RANDOM_BYTES];
    rng.fill(&mut garbage[..]);
    let mut d = FrameDecoder::new();
    let mut ok = 0usize;
    for chunk in garbage.chunks(4096) {
        d.push(chunk);
        while let Some(item) = d.next_frame() {
            ok += usize::from(item.is_ok());
        }
    }
    d.finish();
    for start in (0..garbage.len()).step_by(97) {
        let _ = decode_frame(&garbage[start..]);
    }
    let took = within(started, Duration::from_secs(10))?;
    Ok(format!(
        "{CODEC_ROUND_TRIPS} round trips exact, {flips}/{flips} bit flips detected on the {}-byte frame, \
         {CODEC_RANDOM_BYTES} random bytes decoded without panic ({ok} chance frames, {} corrupt), {took:.1?}",
        fixed.len(),
        d.corrupt_count()
    ))
}

/// Live run of the 70 s demo into the acquisition listener over loopback.
fn end_to_end_loopback() -> Checked {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let proto = repo_protocol("demo.proto");
    let p = expand(&parse_protocol(&fs::read_to_string(&proto).unwrap()).unwrap()).unwrap();
    let rx_dir = dir.path().join("rx");
    let mut listener = bin()
        .args(["listen", "--port", "0", "--rate", "2", "--protocol", s(&proto), "--timeout", "20", "--out", s(&rx_dir)])
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut lines = BufReader::new(listener.stdout.take().unwrap()).lines();
    let first = lines.next().ok_or("listener printed nothing")?.map_err(|e| e.to_string())?;
    let addr = first.strip_prefix("listening on ").ok_or_else(|| format!("unexpected: {first}"))?.to_string();

    let record = dir.path().join("record.csv");
    let run = bin()
        .args(["run", s(&proto), "--strategy", "deadline", "--sink", &format!("tcp:{addr}"), "--record", s(&record)])
        .output()
        .map_err(|e| e.to_string())?;
    check(run.status.success(), || {
        format!("run exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr))
    })?;
    let status = listener.wait().map_err(|e| e.to_string())?;
    check(status.success(), || format!("listen exit {:?}", status.code()))?;

    // Rounding oracle: rows = ceil(2 Hz * 70 s); row of an onset = round(2 Hz * t).
    let rate_num = 2u64;
    let total = p.total_duration_ms();
    let oracle_rows = (total * rate_num).div_ceil(1000) as usize;
    let oracle_marked: Vec<(usize, u8)> = p
        .expected_timeline()
        .events
        .iter()
        .map(|e| (((e.offset_ms * rate_num + 500) / 1000) as usize, e.marker))
        .collect();
    let series = fs::read_to_string(rx_dir.join("series.csv")).map_err(|e| e.to_string())?;
    let mut rows = series.lines();
    check(rows.next() == Some("index,value,marker"), || "series header".into())?;
    let rows: Vec<Vec<String>> = rows.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let marked: Vec<(usize, u8)> =
        rows.iter().filter(|r| r[2] != "0").map(|r| (r[0].parse().unwrap(), r[2].parse().unwrap())).collect();
    check(rows.len() == oracle_rows && oracle_rows == 140, || format!("{} rows, oracle {oracle_rows}", rows.len()))?;
    check(marked == oracle_marked, || format!("marked rows {marked:?}, oracle {oracle_marked:?}"))?;
    check(marked.iter().map(|m| m.0).collect::<Vec<_>>() == [0, 40, 100], || format!("{marked:?}"))?;

    let verify = bin()
        .args(["verify", s(&proto), s(&rx_dir.join("receiver_log.csv")), "--tol"])
        .arg(LOOPBACK_TOL_MS.to_string())
        .args(["--out", s(&dir.path().join("report"))])
        .output()
        .map_err(|e| e.to_string())?;
    let vout = String::from_utf8_lossy(&verify.stdout).into_owned();
    check(verify.status.code() == Some(0), || format!("verify exit {:?}: {vout}", verify.status.code()))?;
    Ok(format!(
        "{} rows, markers at rows {:?}, verify exit 0 at tol {LOOPBACK_TOL_MS} ms ({}), {:.1?}",
        rows.len(),
        marked.iter().map(|m| m.0).collect::<Vec<_>>(),
        vout.lines().next().unwrap_or_default(),
        started.elapsed()
    ))
}

fn random_ident(rng: &mut ChaCha8Rng) -> String {
    const FIRST: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
    const REST: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789.-";
    let len = rng.random_range(0..8);
    let mut s = String::new();
    s.push(FIRST[rng.random_range(0..FIRST.len())] as char);
    for _ in 0..len {
        s.push(REST[rng.random_range(0..REST.len())] as char);
    }
    s
}

fn random_items(rng: &mut ChaCha8Rng, names: &[String], depth: usize) -> Vec<Item> {
    (0..rng.random_range(1..5))
        .map(|_| {
            if depth < 8 && rng.random_bool(0.25) {
                Item::Repeat { count: rng.random_range(1..6), items: random_items(rng, names, depth + 1) }
            } else {
                let label = match rng.random_range(0..5) {
                    0 => "rest".to_string(),
                    1 => "quiz".to_string(),
                    2 => "concept".to_string(),
                    3 => "feedback".to_string(),
                    _ => random_ident(rng),
                };
                let duration = match rng.random_range(0..3) {
                    0 => rng.random_range(1..10_000),
                    1 => rng.random_range(1..600) * 1_000,
                    _ => rng.random_range(1..30) * 60_000,
                };
                let b = Block::new(label, names[rng.random_range(0..names.len())].clone(), duration);
                Item::Block(if rng.random_bool(0.3) {
                    b.with_offset(names[rng.random_range(0..names.len())].clone())
                } else {
                    b
                })
            }
        })
        .collect()
}

fn random_spec(rng: &mut ChaCha8Rng) -> ProtocolSpec {
    let mut markers: BTreeMap<String, u8> = BTreeMap::new();
    let mut codes: Vec<u8> = (1..=255).collect();
    for _ in 0..rng.random_range(1..8) {
        let name = random_ident(rng);
        if let std::collections::btree_map::Entry::Vacant(slot) = markers.entry(name) {
            slot.insert(codes.swap_remove(rng.random_range(0..codes.len())));
        }
    }
    let markers: Vec<MarkerCode> = markers.into_iter().map(|(n, c)| MarkerCode::new(n, c)).collect();
    let names: Vec<String> = markers.iter().map(|m| m.name.clone()).collect();
    ProtocolSpec { name: random_ident(rng), markers, items: random_items(rng, &names, 0) }
}

/// Random-spec round trips plus the diagnostic cases through `validate`.
fn parser() -> Checked {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x5eed);
    for i in 0..PARSER_ROUND_TRIPS {
        let spec = random_spec(&mut rng);
        let text = serialize_protocol(&spec);
        let parsed = parse_protocol(&text).map_err(|d| format!("spec {i} failed to parse: {d}\n{text}"))?;
        check(parsed == spec, || format!("spec {i} changed in round trip:\n{text}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = [
        ("range", "protocol p\nmarker REST=0\nblock rest REST 20s\n", "code out of range [1,255]"),
        ("duplicate", "protocol p\nmarker REST=1\nmarker QUIZ=1\nblock rest REST 20s\n", "duplicate marker code"),
        ("unknown", "protocol p\nmarker REST=1\nblock quiz QUIZ 30s\n", "unknown marker 'QUIZ'"),
        (
            "nonpositive",
            "protocol p\nmarker REST=1\nblock rest REST 0s\nrepeat 0 { block rest REST 1s }\n",
            "must be positive",
        ),
        ("syntax", "protocol p\nmarker REST=1\nblock rest REST\n", "expected"),
    ];
    for (name, text, needle) in cases {
        let path = dir.path().join(format!("{name}.proto"));
        fs::write(&path, text).unwrap();
        let o = bin().args(["validate", s(&path)]).output().map_err(|e| e.to_string())?;
        let err = String::from_utf8_lossy(&o.stderr);
        check(o.status.code() == Some(2), || format!("{name}: exit {:?}", o.status.code()))?;
        check(err.contains(needle), || format!("{name}: {err}"))?;
    }
    Ok(format!(
        "{PARSER_ROUND_TRIPS} random specs round-trip exactly; {} diagnostic cases exit 2; {:.1?}",
        cases.len(),
        started.elapsed()
    ))
}

struct CountingRecorder(usize);

impl EventRecorder for CountingRecorder {
    fn record(&mut self, _event: RecordedEvent) {
        self.0 += 1;
    }
}

/// Dispatch count and scheduler working memory across protocol sizes.
fn scheduler_profile() -> Checked {
    let mut peaks = Vec::new();
    for n in [1usize, 10, 100, 1000] {
        let p = protocol(&format!("protocol n\nmarker A=1\nrepeat {n} {{ block rest A 10ms }}\n"));
        check(p.event_count() == n, || format!("protocol of {n} has {} events", p.event_count()))?;
        let mut clock = FakeClock::new(0);
        let mut sink = NullSink::default();
        let mut recorder = CountingRecorder(0);
        let session = Session::new(&p, Strategy::Deadline);
        let (summary, peak, allocs) =
            measure(|| session.run_into(&mut clock, &mut sink, &mut NoControl, &mut recorder));
        check(summary.dispatched == n && recorder.0 == n && sink.sent == n as u64, || {
            format!("n={n}: dispatched {}, recorded {}, sent {}", summary.dispatched, recorder.0, sink.sent)
        })?;
        peaks.push((n, peak, allocs));
    }
    let lo = peaks.iter().map(|p| p.1).min().unwrap();
    let hi = peaks.iter().map(|p| p.1).max().unwrap();
    let table: Vec<String> = peaks.iter().map(|(n, b, a)| format!("n={n}: {b} B peak / {a} allocs")).collect();
    check(hi - lo <= MEMORY_NOISE_BYTES, || format!("memory grows: {}", table.join(", ")))?;
    Ok(format!("dispatched = n for all sizes; {}", table.join(", ")))
}

fn main() {
    // libtest-style flags (such as those `cargo test` forwards) are ignored;
    // a bare argument filters criteria by name.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 7] = [
        ("cumulative-curve reproduction (logical)", cumulative_curve_reproduction),
        ("drift laws", drift_laws),
        ("real-clock desk run", real_clock_desk_run),
        ("codec", codec),
        ("end-to-end loopback", end_to_end_loopback),
        ("parser", parser),
        ("scheduler profile", scheduler_profile),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
