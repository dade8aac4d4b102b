//! Session lifecycle and operator commands.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pending,
    Running,
    Paused,
    Aborted,
    Completed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Aborted | Phase::Completed)
    }

    pub fn is_active(self) -> bool {
        matches!(self, Phase::Running | Phase::Paused)
    }

    /// The legal transition table.
    pub fn can_become(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Pending, Running)
                | (Running, Paused)
                | (Running, Aborted)
                | (Running, Completed)
                | (Paused, Running)
                | (Paused, Aborted)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Pending => "pending",
            Phase::Running => "running",
            Phase::Paused => "paused",
            Phase::Aborted => "aborted",
            Phase::Completed => "completed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub current_block_index: usize,
    /// Raw clock instant at which the session started running.
    pub started_at: Option<u64>,
    pub pause_accumulated_ms: u64,
}

impl Default for SessionState {
    fn default() -> Self {
        Self { phase: Phase::Pending, current_block_index: 0, started_at: None, pause_accumulated_ms: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Pause,
    Resume,
    Abort,
    #[serde(alias = "marker")]
    ManualMarker {
        code: u8,
    },
}

impl FromStr for Command {
    type Err = String;

    /// `pause`, `resume`, `abort` or `marker:<code>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pause" => Ok(Command::Pause),
            "resume" => Ok(Command::Resume),
            "abort" => Ok(Command::Abort),
            other => match other.strip_prefix("marker:").map(str::parse::<u8>) {
                Some(Ok(code)) => Ok(Command::ManualMarker { code }),
                _ => Err(format!("unknown command '{other}'")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{reason} (phase {})", state.phase)]
pub struct Rejection {
    pub reason: String,
    pub state: SessionState,
}

impl SessionState {
    fn transition(&mut self, next: Phase) -> Result<(), Rejection> {
        if self.phase.can_become(next) {
            self.phase = next;
            Ok(())
        } else {
            Err(Rejection { reason: format!("cannot go from {} to {next}", self.phase), state: *self })
        }
    }

    pub fn start(&mut self, now_ms: u64) -> Result<(), Rejection> {
        self.transition(Phase::Running)?;
        self.started_at = Some(now_ms);
        Ok(())
    }

    pub fn complete(&mut self) -> Result<(), Rejection> {
        self.transition(Phase::Completed)
    }

    /// Applies an operator command's phase change. Manual markers do not
    /// change phase but need an active session.
    pub fn apply(&mut self, cmd: Command) -> Result<(), Rejection> {
        match cmd {
            Command::Pause => self.transition(Phase::Paused),
            Command::Resume => self.transition(Phase::Running),
            Command::Abort => self.transition(Phase::Aborted),
            Command::ManualMarker { code } => {
                if !self.phase.is_active() {
                    Err(Rejection { reason: "manual marker needs an active session".into(), state: *self })
                } else if code == 0 {
                    Err(Rejection { reason: "marker code 0 is reserved".into(), state: *self })
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Acknowledgment sent back to whoever issued a command.
pub type ControlReply = Result<SessionState, Rejection>;

#[derive(Debug)]
pub struct ControlRequest {
    pub command: Command,
    pub reply: Option<mpsc::Sender<ControlReply>>,
}

impl From<Command> for ControlRequest {
    fn from(command: Command) -> Self {
        Self { command, reply: None }
    }
}

/// Ordered source of control commands, polled by the running session.
pub trait ControlSource {
    fn poll(&mut self, now_ms: u64) -> Option<ControlRequest>;

    /// Raw clock instant at which the next command becomes due, if known.
    /// Lets simulated runs wake exactly when a scripted command fires.
    fn next_due_ms(&self) -> Option<u64> {
        None
    }

    /// True when no further command can ever arrive.
    fn is_closed(&self) -> bool {
        false
    }
}

impl<K: ControlSource + ?Sized> ControlSource for &mut K {
    fn poll(&mut self, now_ms: u64) -> Option<ControlRequest> {
        (**self).poll(now_ms)
    }

    fn next_due_ms(&self) -> Option<u64> {
        (**self).next_due_ms()
    }

    fn is_closed(&self) -> bool {
        (**self).is_closed()
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoControl;

impl ControlSource for NoControl {
    fn poll(&mut self, _now_ms: u64) -> Option<ControlRequest> {
        None
    }

    fn is_closed(&self) -> bool {
        true
    }
}

/// Commands delivered at fixed raw clock instants.
#[derive(Debug, Default, Clone)]
pub struct ScriptedControl {
    script: VecDeque<(u64, Command)>,
}

impl ScriptedControl {
    pub fn new(mut script: Vec<(u64, Command)>) -> Self {
        script.sort_by_key(|(at, _)| *at);
        Self { script: script.into() }
    }
}

impl ControlSource for ScriptedControl {
    fn poll(&mut self, now_ms: u64) -> Option<ControlRequest> {
        match self.script.front() {
            Some(&(at, _)) if at <= now_ms => self.script.pop_front().map(|(_, c)| c.into()),
            _ => None,
        }
    }

    fn next_due_ms(&self) -> Option<u64> {
        self.script.front().map(|(at, _)| *at)
    }

    fn is_closed(&self) -> bool {
        self.script.is_empty()
    }
}

/// Commands from other threads over an ordered channel.
pub struct ChannelControl {
    rx: mpsc::Receiver<ControlRequest>,
    closed: bool,
}

impl ChannelControl {
    pub fn new() -> (mpsc::Sender<ControlRequest>, Self) {
        let (tx, rx) = mpsc::channel();
        (tx, Self { rx, closed: false })
    }
}

impl ControlSource for ChannelControl {
    fn poll(&mut self, _now_ms: u64) -> Option<ControlRequest> {
        match self.rx.try_recv() {
            Ok(req) => Some(req),
            Err(mpsc::TryRecvError::Empty) => None,
            Err(mpsc::TryRecvError::Disconnected) => {
                self.closed = true;
                None
            }
        }
    }

    fn is_closed(&self) -> bool {
        self.closed
    }
}
