//! Simulated acquisition host.
//!
//! [`Listener`] accepts a single sender on a local TCP socket, reads
//! length-delimited messages, and decodes each with the resynchronizing
//! frame decoder. Arrival time is taken when a frame finishes decoding and
//! is measured from the moment the sender connection was accepted.
//!
//! [`annotate`] turns the received events into a sample series with a
//! marker channel, as an acquisition file would store it.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::NO_MARKER;
use crate::transport::{FrameDecoder, MarkerFrame};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 2.0;

/// Fixed seed of the synthetic waveform.
pub const WAVEFORM_SEED: u64 = 0x6d61_726b_6572;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedEvent {
    pub frame: MarkerFrame,
    pub recv_offset_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ListenStatus {
    /// The sender closed its side of the connection.
    SenderClosed,
    /// Nobody connected before the accept timeout.
    AcceptTimeout,
    /// The sender went quiet for longer than the idle timeout.
    IdleTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ListenSession {
    pub status: ListenStatus,
    pub events: Vec<ReceivedEvent>,
    /// Messages that held a corrupt frame.
    pub corrupt_frames: u64,
    /// Bytes that belonged to no frame.
    pub discarded_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ListenerConfig {
    pub accept_timeout: Duration,
    /// Gives up on a connected sender that sends nothing for this long.
    pub idle_timeout: Option<Duration>,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self { accept_timeout: Duration::from_secs(30), idle_timeout: None }
    }
}

/// Append-only received-event log, readable while the listener runs.
#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<ReceivedEvent>>>);

impl EventLog {
    pub fn snapshot(&self) -> Vec<ReceivedEvent> {
        self.0.lock().unwrap().clone()
    }

    fn push(&self, ev: ReceivedEvent) {
        self.0.lock().unwrap().push(ev);
    }
}

pub struct Listener {
    socket: TcpListener,
    log: EventLog,
}

impl Listener {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Ok(Self { socket: TcpListener::bind(addr)?, log: EventLog::default() })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn log(&self) -> EventLog {
        self.log.clone()
    }

    /// Serves one sender until it disconnects or a timeout fires.
    pub fn run(self, config: &ListenerConfig) -> io::Result<ListenSession> {
        let Some(stream) = self.accept(config.accept_timeout)? else {
            return Ok(ListenSession {
                status: ListenStatus::AcceptTimeout,
                events: Vec::new(),
                corrupt_frames: 0,
                discarded_bytes: 0,
            });
        };
        let origin = Instant::now();
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(config.idle_timeout)?;
        self.receive(stream, origin)
    }

    fn accept(&self, timeout: Duration) -> io::Result<Option<TcpStream>> {
        self.socket.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        loop {
            match self.socket.accept() {
                Ok((stream, _)) => return Ok(Some(stream)),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn receive(&self, mut stream: TcpStream, origin: Instant) -> io::Result<ListenSession> {
        let mut corrupt_frames = 0;
        let mut discarded_bytes = 0;
        let mut payload = Vec::new();
        let status = loop {
            match read_delimited(&mut stream, &mut payload) {
                Ok(true) => {}
                Ok(false) => break ListenStatus::SenderClosed,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    break ListenStatus::IdleTimeout
                }
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => break ListenStatus::SenderClosed,
                Err(e) => return Err(e),
            }
            let mut decoder = FrameDecoder::new();
            decoder.push(&payload);
            let mut saw_corrupt = false;
            while let Some(item) = decoder.next_frame() {
                match item {
                    Ok(frame) => {
                        let recv_offset_ms = origin.elapsed().as_millis() as u64;
                        self.log.push(ReceivedEvent { frame, recv_offset_ms });
                    }
                    Err(_) => saw_corrupt = true,
                }
            }
            decoder.finish();
            corrupt_frames += u64::from(saw_corrupt);
            discarded_bytes += decoder.skipped_bytes();
        };
        Ok(ListenSession { status, events: self.log.snapshot(), corrupt_frames, discarded_bytes })
    }
}

/// Reads one `u16`-length-prefixed message into `buf`. `Ok(false)` on a
/// clean end of stream before the prefix.
pub fn read_delimited(r: &mut impl Read, buf: &mut Vec<u8>) -> io::Result<bool> {
    let mut len = [0u8; 2];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(false),
        Err(e) => return Err(e),
    }
    buf.resize(usize::from(u16::from_be_bytes(len)), 0);
    r.read_exact(buf)?;
    Ok(true)
}

/// Binds and serves one sender.
pub fn listen(addr: impl ToSocketAddrs, config: &ListenerConfig) -> io::Result<ListenSession> {
    Listener::bind(addr)?.run(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub value: f64,
    pub marker: u8,
}

/// Two events mapped to one row; the earlier one's code was kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub row: usize,
    pub kept: u8,
    pub dropped: u8,
    pub dropped_offset_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotatedSeries {
    pub sample_rate_hz: f64,
    pub samples: Vec<Sample>,
    pub conflicts: Vec<Conflict>,
}

/// Rounds `x` to the nearest integer when it is within float noise of one.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

pub fn row_count(duration_ms: u64, sample_rate_hz: f64) -> usize {
    snap(duration_ms as f64 * sample_rate_hz / 1000.0).ceil().max(0.0) as usize
}

/// Row nearest to offset `t_ms`, clamped into `0..rows`.
pub fn row_for(t_ms: u64, sample_rate_hz: f64, rows: usize) -> usize {
    let row = snap(t_ms as f64 * sample_rate_hz / 1000.0).round() as usize;
    row.min(rows.saturating_sub(1))
}

/// Builds the sample series: `ceil(duration * rate)` rows of a fixed-seed
/// random walk, with each event's code on its nearest row. When two events
/// land on one row, the earlier arrival wins and the collision is logged.
pub fn annotate(events: &[ReceivedEvent], sample_rate_hz: f64, duration_ms: u64) -> AnnotatedSeries {
    assert!(sample_rate_hz > 0.0, "sample rate must be positive");
    let rows = row_count(duration_ms, sample_rate_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(WAVEFORM_SEED);
    let mut value = 0.0f64;
    let mut samples: Vec<Sample> = (0..rows)
        .map(|index| {
            value += rng.random_range(-0.05..0.05);
            Sample { index, value, marker: NO_MARKER }
        })
        .collect();

    let mut conflicts = Vec::new();
    if rows > 0 {
        for ev in events {
            let row = row_for(ev.recv_offset_ms, sample_rate_hz, rows);
            let slot = &mut samples[row].marker;
            if *slot == NO_MARKER {
                *slot = ev.frame.code;
            } else {
                conflicts.push(Conflict {
                    row,
                    kept: *slot,
                    dropped: ev.frame.code,
                    dropped_offset_ms: ev.recv_offset_ms,
                });
            }
        }
    }
    AnnotatedSeries { sample_rate_hz, samples, conflicts }
}

impl AnnotatedSeries {
    pub const CSV_HEADER: &'static str = "index,value,marker";

    pub fn marker_rows(&self) -> Vec<(usize, u8)> {
        self.samples.iter().filter(|s| s.marker != NO_MARKER).map(|s| (s.index, s.marker)).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for s in &self.samples {
            writer.serialize(s)?;
        }
        if self.samples.is_empty() {
            writer.write_record(Self::CSV_HEADER.split(','))?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    recv_ms: u64,
    code: u8,
    seq: u16,
}

pub const RECEIVER_LOG_HEADER: &str = "recv_ms,code,seq";

pub fn write_receiver_log(events: &[ReceivedEvent], w: impl Write) -> csv::Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    writer.write_record(RECEIVER_LOG_HEADER.split(','))?;
    for e in events {
        writer.serialize(LogRow { recv_ms: e.recv_offset_ms, code: e.frame.code, seq: e.frame.seq })?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_receiver_log(r: impl Read) -> csv::Result<Vec<ReceivedEvent>> {
    let mut reader = csv::Reader::from_reader(r);
    reader
        .deserialize::<LogRow>()
        .map(|row| row.map(|r| ReceivedEvent { frame: MarkerFrame::new(r.code, r.seq), recv_offset_ms: r.recv_ms }))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::thread;

    use super::*;
    use crate::transport::{encode_frame, write_delimited};

    fn ev(code: u8, seq: u16, t: u64) -> ReceivedEvent {
        ReceivedEvent { frame: MarkerFrame::new(code, seq), recv_offset_ms: t }
    }

    #[test]
    fn demo_rows_and_markers() {
        let events = [ev(1, 0, 0), ev(2, 1, 20_000), ev(1, 2, 50_000)];
        let series = annotate(&events, 2.0, 70_000);
        assert_eq!(series.samples.len(), 140);
        assert_eq!(series.marker_rows(), [(0, 1), (40, 2), (100, 1)]);
        assert!(series.conflicts.is_empty());
    }

    #[test]
    fn no_events_no_markers() {
        let series = annotate(&[], 2.0, 10_000);
        assert_eq!(series.samples.len(), 20);
        assert!(series.samples.iter().all(|s| s.marker == 0));
    }

    #[test]
    fn collision_keeps_earliest() {
        let series = annotate(&[ev(1, 0, 1000), ev(2, 1, 1001)], 2.0, 5_000);
        assert_eq!(series.marker_rows(), [(2, 1)]);
        assert_eq!(series.conflicts, [Conflict { row: 2, kept: 1, dropped: 2, dropped_offset_ms: 1001 }]);
    }

    #[test]
    fn late_events_clamp_to_last_row() {
        let series = annotate(&[ev(3, 0, 99_999)], 2.0, 1_000);
        assert_eq!(series.marker_rows(), [(1, 3)]);
    }

    #[test]
    fn row_count_rounds_up_without_float_noise() {
        assert_eq!(row_count(70_000, 2.0), 140);
        assert_eq!(row_count(70_001, 2.0), 141);
        assert_eq!(row_count(10_000, 0.3), 3);
        assert_eq!(row_count(0, 2.0), 0);
    }

    #[test]
    fn waveform_is_reproducible() {
        let a = annotate(&[], 10.0, 3_000);
        let b = annotate(&[], 10.0, 3_000);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(String::from_utf8(ca).unwrap().starts_with("index,value,marker\n0,"));
    }

    #[test]
    fn receiver_log_round_trip() {
        let events = vec![ev(1, 0, 3), ev(2, 1, 20_004)];
        let mut out = Vec::new();
        write_receiver_log(&events, &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "recv_ms,code,seq\n3,1,0\n20004,2,1\n");
        assert_eq!(read_receiver_log(out.as_slice()).unwrap(), events);
    }

    fn send_messages(addr: SocketAddr, messages: Vec<Vec<u8>>) -> thread::JoinHandle<()> {
        thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            for m in messages {
                write_delimited(&mut s, &m).unwrap();
            }
        })
    }

    fn frame(code: u8, seq: u16) -> Vec<u8> {
        encode_frame(&MarkerFrame::new(code, seq).with_timestamp(u32::from(seq) * 10)).unwrap().to_vec()
    }

    #[test]
    fn receives_frames_in_order() {
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        let sender = send_messages(listener.local_addr().unwrap(), (0..5).map(|i| frame(i as u8 + 1, i)).collect());
        let session = listener.run(&ListenerConfig::default()).unwrap();
        sender.join().unwrap();
        assert_eq!(session.status, ListenStatus::SenderClosed);
        assert_eq!(session.corrupt_frames, 0);
        let seqs: Vec<u16> = session.events.iter().map(|e| e.frame.seq).collect();
        assert_eq!(seqs, [0, 1, 2, 3, 4]);
        assert!(session.events.windows(2).all(|w| w[0].recv_offset_ms <= w[1].recv_offset_ms));
    }

    #[test]
    fn corrupt_frames_are_counted_not_fatal() {
        let mut bad = frame(3, 2);
        bad[6] ^= 0x40;
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        let sender = send_messages(
            listener.local_addr().unwrap(),
            vec![frame(1, 0), frame(2, 1), bad, frame(4, 3), frame(5, 4)],
        );
        let session = listener.run(&ListenerConfig::default()).unwrap();
        sender.join().unwrap();
        assert_eq!(session.events.len(), 4);
        assert_eq!(session.corrupt_frames, 1);
        let codes: Vec<u8> = session.events.iter().map(|e| e.frame.code).collect();
        assert_eq!(codes, [1, 2, 4, 5]);
    }

    #[test]
    fn accept_timeout_yields_empty_session() {
        let session =
            listen("127.0.0.1:0", &ListenerConfig { accept_timeout: Duration::from_millis(30), idle_timeout: None })
                .unwrap();
        assert_eq!(session.status, ListenStatus::AcceptTimeout);
        assert!(session.events.is_empty());
    }

    #[test]
    fn idle_sender_times_out() {
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            write_delimited(&mut s, &frame(1, 0)).unwrap();
            thread::sleep(Duration::from_millis(300));
        });
        let cfg =
            ListenerConfig { accept_timeout: Duration::from_secs(5), idle_timeout: Some(Duration::from_millis(50)) };
        let session = listener.run(&cfg).unwrap();
        assert_eq!(session.status, ListenStatus::IdleTimeout);
        assert_eq!(session.events.len(), 1);
        hold.join().unwrap();
    }
}
