//! Protocol execution.
//!
//! Two strategies share one session loop:
//!
//! - [`Strategy::Naive`] sends each onset, then sleeps the block duration
//!   measured from the end of the send. Per-event cost accumulates as drift.
//! - [`Strategy::Deadline`] dispatches event `k` at `t0 + expected_offset_k`,
//!   so per-event cost never accumulates. A deadline that has already passed
//!   is sent immediately; later deadlines are unchanged.
//!
//! An event is flagged late when it went out after its scheduled offset.
//!
//! Paused time is excluded from session time, so resuming shifts every
//! remaining deadline by the paused span. Control commands are polled before
//! every send and at least every [`POLL_SLICE_MS`] while sleeping.

mod clock;
mod control;
mod record;

pub use clock::{Clock, FakeClock, MonotonicClock};
pub use control::{
    ChannelControl, Command, ControlReply, ControlRequest, ControlSource, NoControl, Phase, Rejection, ScriptedControl,
    SessionState,
};
pub use record::{
    read_events_csv, write_events_csv, CsvEventWriter, EventRecorder, ExecutionRecord, Origin, Outcome, RecordError,
    RecordedEvent,
};

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::protocol::Protocol;
use crate::transport::{DeliveryStatus, MarkerSink, Transmitter};

/// Longest uninterrupted sleep between control polls.
pub const POLL_SLICE_MS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Deadline,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Naive => "naive",
            Strategy::Deadline => "deadline",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "deadline" => Ok(Strategy::Deadline),
            other => Err(format!("unknown strategy '{other}' (expected naive or deadline)")),
        }
    }
}

/// State shared between a running session and its observers: the current
/// [`SessionState`] and an append-only copy of recorded events.
#[derive(Debug, Clone, Default)]
pub struct SessionMonitor(Arc<Mutex<MonitorState>>);

#[derive(Debug, Default)]
struct MonitorState {
    state: SessionState,
    events: Vec<RecordedEvent>,
    outcome: Option<Outcome>,
    failure: Option<String>,
}

impl SessionMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> SessionState {
        self.0.lock().unwrap().state
    }

    /// Events recorded after the first `from`.
    pub fn events_since(&self, from: usize) -> Vec<RecordedEvent> {
        let inner = self.0.lock().unwrap();
        inner.events.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn event_count(&self) -> usize {
        self.0.lock().unwrap().events.len()
    }

    /// `Some` once the session has finished.
    pub fn outcome(&self) -> Option<(Outcome, Option<String>)> {
        let inner = self.0.lock().unwrap();
        inner.outcome.map(|o| (o, inner.failure.clone()))
    }

    fn set_state(&self, state: SessionState) {
        self.0.lock().unwrap().state = state;
    }

    fn push(&self, event: RecordedEvent) {
        self.0.lock().unwrap().events.push(event);
    }

    fn finish(&self, state: SessionState, outcome: Outcome, failure: Option<String>) {
        let mut inner = self.0.lock().unwrap();
        inner.state = state;
        inner.outcome = Some(outcome);
        inner.failure = failure;
    }
}

/// What a run did, apart from its recorded events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub outcome: Outcome,
    pub failure: Option<String>,
    /// Protocol events handed to the sink.
    pub dispatched: usize,
    pub final_state: SessionState,
}

/// One protocol execution.
pub struct Session<'p> {
    protocol: &'p Protocol,
    strategy: Strategy,
    monitor: Option<SessionMonitor>,
}

impl<'p> Session<'p> {
    pub fn new(protocol: &'p Protocol, strategy: Strategy) -> Self {
        Self { protocol, strategy, monitor: None }
    }

    pub fn with_monitor(mut self, monitor: SessionMonitor) -> Self {
        self.monitor = Some(monitor);
        self
    }

    /// Runs to completion or abort, collecting every event.
    pub fn run<C, S, K>(&self, clock: &mut C, sink: &mut S, control: &mut K) -> ExecutionRecord
    where
        C: Clock + ?Sized,
        S: MarkerSink + ?Sized,
        K: ControlSource + ?Sized,
    {
        let mut events = Vec::with_capacity(self.protocol.event_count());
        let summary = self.run_into(clock, sink, control, &mut events);
        ExecutionRecord { strategy: self.strategy, outcome: summary.outcome, events, failure: summary.failure }
    }

    /// Runs, handing each event to `recorder` instead of collecting it.
    pub fn run_into<C, S, K, R>(&self, clock: &mut C, sink: &mut S, control: &mut K, recorder: &mut R) -> RunSummary
    where
        C: Clock + ?Sized,
        S: MarkerSink + ?Sized,
        K: ControlSource + ?Sized,
        R: EventRecorder + ?Sized,
    {
        let mut run = Runner {
            clock,
            control,
            recorder,
            tx: Transmitter::new(sink),
            monitor: self.monitor.as_ref(),
            state: SessionState::default(),
            t0: 0,
            pause_started: None,
            next_seq: 0,
            dispatched: 0,
            failure: None,
        };
        let now = run.clock.now_ms();
        run.t0 = now;
        run.state.start(now).expect("fresh session starts");
        run.publish_state();

        let finished = match self.strategy {
            Strategy::Naive => run.naive(self.protocol),
            Strategy::Deadline => run.deadline(self.protocol),
        };
        let outcome = if finished.is_some() && run.state.complete().is_ok() {
            Outcome::Completed
        } else {
            if run.state.phase != Phase::Aborted {
                run.state.phase = Phase::Aborted;
            }
            Outcome::Aborted
        };
        if let Some(m) = run.monitor {
            m.finish(run.state, outcome, run.failure.clone());
        }
        RunSummary { outcome, failure: run.failure, dispatched: run.dispatched, final_state: run.state }
    }
}

/// Sequential-sleep execution.
pub fn run_naive<C, S, K>(p: &Protocol, clock: &mut C, sink: &mut S, control: &mut K) -> ExecutionRecord
where
    C: Clock + ?Sized,
    S: MarkerSink + ?Sized,
    K: ControlSource + ?Sized,
{
    Session::new(p, Strategy::Naive).run(clock, sink, control)
}

/// Absolute-deadline execution.
pub fn run_deadline<C, S, K>(p: &Protocol, clock: &mut C, sink: &mut S, control: &mut K) -> ExecutionRecord
where
    C: Clock + ?Sized,
    S: MarkerSink + ?Sized,
    K: ControlSource + ?Sized,
{
    Session::new(p, Strategy::Deadline).run(clock, sink, control)
}

/// Session loop state. Everything here is fixed-size; events go straight
/// to the recorder.
struct Runner<'a, C: ?Sized, K: ?Sized, R: ?Sized, S: ?Sized> {
    clock: &'a mut C,
    control: &'a mut K,
    recorder: &'a mut R,
    tx: Transmitter<&'a mut S>,
    monitor: Option<&'a SessionMonitor>,
    state: SessionState,
    t0: u64,
    pause_started: Option<u64>,
    next_seq: u64,
    dispatched: usize,
    failure: Option<String>,
}

/// `None` means the session stopped early (abort or sink failure).
type Flow = Option<()>;

impl<C, K, R, S> Runner<'_, C, K, R, S>
where
    C: Clock + ?Sized,
    K: ControlSource + ?Sized,
    R: EventRecorder + ?Sized,
    S: MarkerSink + ?Sized,
{
    fn naive(&mut self, p: &Protocol) -> Flow {
        let mut scheduled = 0;
        for (i, block) in p.blocks().iter().enumerate() {
            let (onset, offset) = p.block_codes(i);
            self.enter_block(i);
            self.checkpoint()?;
            self.dispatch(onset, scheduled, Origin::Protocol)?;
            let wake = self.session_now() + block.duration_ms;
            self.wait_until(wake)?;
            scheduled += block.duration_ms;
            if let Some(code) = offset {
                self.checkpoint()?;
                self.dispatch(code, scheduled, Origin::Protocol)?;
            }
        }
        Some(())
    }

    fn deadline(&mut self, p: &Protocol) -> Flow {
        let mut current_block = usize::MAX;
        for ev in p.events() {
            if ev.block_index != current_block {
                current_block = ev.block_index;
                self.enter_block(current_block);
            }
            // returns at once when the deadline has already passed
            self.wait_until(ev.offset_ms)?;
            self.checkpoint()?;
            self.dispatch(ev.marker, ev.offset_ms, Origin::Protocol)?;
        }
        self.wait_until(p.total_duration_ms())
    }

    fn enter_block(&mut self, index: usize) {
        self.state.current_block_index = index;
        self.publish_state();
    }

    fn publish_state(&self) {
        if let Some(m) = self.monitor {
            m.set_state(self.state);
        }
    }

    /// Session time: raw time since start, minus all paused time.
    fn session_now(&self) -> u64 {
        let now = self.pause_started.unwrap_or_else(|| self.clock.now_ms());
        now - self.t0 - self.state.pause_accumulated_ms
    }

    /// Drains pending commands; `None` if the session must stop.
    fn checkpoint(&mut self) -> Flow {
        while let Some(req) = self.control.poll(self.clock.now_ms()) {
            let reply = self.handle(req.command);
            if let Some(tx) = req.reply {
                let _ = tx.send(reply);
            }
            if self.failure.is_some() {
                return None;
            }
        }
        if self.state.phase == Phase::Aborted {
            return None;
        }
        if self.state.phase == Phase::Paused && self.control.is_closed() {
            self.failure = Some("session paused and control source closed".into());
            return None;
        }
        Some(())
    }

    fn handle(&mut self, cmd: Command) -> ControlReply {
        self.state.apply(cmd)?;
        let now = self.clock.now_ms();
        match cmd {
            Command::Pause => self.pause_started = Some(now),
            Command::Resume => {
                if let Some(start) = self.pause_started.take() {
                    self.state.pause_accumulated_ms += now - start;
                }
            }
            Command::Abort => {
                if let Some(start) = self.pause_started.take() {
                    self.state.pause_accumulated_ms += now - start;
                }
            }
            Command::ManualMarker { code } => {
                let at = self.session_now();
                // A failed manual send aborts like any other sink failure.
                let _ = self.dispatch(code, at, Origin::Manual);
            }
        }
        self.publish_state();
        Ok(self.state)
    }

    /// Sleeps until session time `target`, polling controls. Paused time
    /// does not count toward the target.
    fn wait_until(&mut self, target: u64) -> Flow {
        loop {
            self.checkpoint()?;
            let now = self.clock.now_ms();
            let mut wake = now + POLL_SLICE_MS;
            if self.state.phase != Phase::Paused {
                let target_raw = self.t0 + self.state.pause_accumulated_ms + target;
                if now >= target_raw {
                    return Some(());
                }
                wake = wake.min(target_raw);
            }
            if let Some(due) = self.control.next_due_ms() {
                if due > now {
                    wake = wake.min(due);
                }
            }
            self.clock.sleep_until(wake);
        }
    }

    fn dispatch(&mut self, code: u8, scheduled_ms: u64, origin: Origin) -> Flow {
        let actual_ms = self.session_now();
        let late = actual_ms > scheduled_ms;
        let ts = u32::try_from(actual_ms).unwrap_or(u32::MAX);
        let delivery = self.tx.send_via(code, Some(ts));
        self.clock.after_send();
        let recorded = match &delivery.status {
            DeliveryStatus::Delivered => true,
            DeliveryStatus::Partial { failed, .. } => {
                self.failure = Some(format!("partial delivery of marker {code}: {}", failed.join("; ")));
                true
            }
            DeliveryStatus::Failed { error } => {
                self.failure = Some(format!("delivery of marker {code} failed: {error}"));
                false
            }
        };
        if recorded {
            let event = RecordedEvent { seq: self.next_seq, scheduled_ms, actual_ms, marker: code, origin, late };
            self.next_seq += 1;
            if origin == Origin::Protocol {
                self.dispatched += 1;
            }
            if let Some(m) = self.monitor {
                m.push(event);
            }
            self.recorder.record(event);
        }
        if self.failure.is_some() {
            self.state.phase = Phase::Aborted;
            None
        } else {
            Some(())
        }
    }
}
