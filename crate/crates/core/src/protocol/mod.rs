//! Experiment protocol model.
//!
//! A protocol is authored as a [`ProtocolSpec`] (text form, with `repeat`
//! groups), flattened by [`expand`] into a runnable [`Protocol`], and turned
//! into the ground-truth marker schedule by [`expected_timeline`].
//!
//! ```text
//! protocol demo
//! marker REST=1
//! marker QUIZ=2
//! block rest REST 20s
//! repeat 3 { block quiz QUIZ 30s }
//! ```

mod lexer;
mod parser;
mod text;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

pub use lexer::is_identifier;
pub use parser::parse_protocol;
pub use text::{format_duration, serialize_protocol};

/// Maximum nesting of `repeat` groups.
pub const MAX_REPEAT_DEPTH: usize = 8;

/// Marker code 0 means "no event" on the acquisition side.
pub const NO_MARKER: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct MarkerCode {
    pub name: String,
    pub code: u8,
}

impl MarkerCode {
    pub fn new(name: impl Into<String>, code: u8) -> Self {
        Self { name: name.into(), code }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Rest,
    Concept,
    Quiz,
    Feedback,
    Custom,
}

impl BlockKind {
    /// Kind implied by a block label; unrecognised labels are [`BlockKind::Custom`].
    pub fn from_label(label: &str) -> Self {
        match label.to_ascii_lowercase().as_str() {
            "rest" => BlockKind::Rest,
            "concept" => BlockKind::Concept,
            "quiz" => BlockKind::Quiz,
            "feedback" => BlockKind::Feedback,
            _ => BlockKind::Custom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub label: String,
    pub kind: BlockKind,
    pub duration_ms: u64,
    pub onset_marker: String,
    pub offset_marker: Option<String>,
}

impl Block {
    pub fn new(label: impl Into<String>, onset_marker: impl Into<String>, duration_ms: u64) -> Self {
        let label = label.into();
        Self {
            kind: BlockKind::from_label(&label),
            label,
            duration_ms,
            onset_marker: onset_marker.into(),
            offset_marker: None,
        }
    }

    pub fn with_offset(mut self, marker: impl Into<String>) -> Self {
        self.offset_marker = Some(marker.into());
        self
    }

    fn event_count(&self) -> usize {
        1 + usize::from(self.offset_marker.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Block(Block),
    Repeat { count: u32, items: Vec<Item> },
}

/// Authoring form of a protocol, before repeat expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub name: String,
    pub markers: Vec<MarkerCode>,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Position {
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticKind {
    Syntax { expected: Vec<String> },
    NoProtocol,
    InvalidName,
    DuplicateMarkerName,
    DuplicateMarkerCode,
    CodeOutOfRange,
    UnknownMarker,
    NonPositiveDuration,
    NonPositiveRepeat,
    NestingTooDeep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub position: Option<Position>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl Diagnostic {
    pub(crate) fn at(pos: Position, kind: DiagnosticKind, message: impl Into<String>) -> Self {
        Self { position: Some(pos), kind, message: message.into() }
    }

    pub(crate) fn unplaced(kind: DiagnosticKind, message: impl Into<String>) -> Self {
        Self { position: None, kind, message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some(pos) => write!(f, "{pos}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found in one protocol source, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl Diagnostics {
    pub fn iter(&self) -> impl Iterator<Item = &Diagnostic> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, kind: &DiagnosticKind) -> bool {
        self.0.iter().any(|d| &d.kind == kind)
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostics {}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid protocol:\n{0}")]
    Invalid(Diagnostics),
    #[error("protocol '{0}' has no blocks and cannot be run")]
    Empty(String),
}

impl ProtocolSpec {
    /// Checks the structural invariants of a programmatically built spec.
    ///
    /// The parser reports the same problems with source positions; this is
    /// for specs that never came from text.
    pub fn validate(&self) -> Result<(), Diagnostics> {
        let mut diags = Vec::new();
        if !is_identifier(&self.name) {
            diags.push(Diagnostic::unplaced(
                DiagnosticKind::InvalidName,
                format!("protocol name '{}' is not an identifier", self.name),
            ));
        }
        let mut names = HashMap::new();
        let mut codes = HashMap::new();
        for m in &self.markers {
            if !is_identifier(&m.name) {
                diags.push(Diagnostic::unplaced(
                    DiagnosticKind::InvalidName,
                    format!("marker name '{}' is not an identifier", m.name),
                ));
            }
            if m.code == NO_MARKER {
                diags.push(Diagnostic::unplaced(
                    DiagnosticKind::CodeOutOfRange,
                    format!("marker '{}': code out of range [1,255]", m.name),
                ));
            }
            if names.insert(m.name.as_str(), ()).is_some() {
                diags.push(Diagnostic::unplaced(
                    DiagnosticKind::DuplicateMarkerName,
                    format!("duplicate marker name '{}'", m.name),
                ));
            }
            if codes.insert(m.code, ()).is_some() {
                diags.push(Diagnostic::unplaced(
                    DiagnosticKind::DuplicateMarkerCode,
                    format!("duplicate marker code {}", m.code),
                ));
            }
        }
        validate_items(&self.items, 0, &names, &mut diags);
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Diagnostics(diags))
        }
    }
}

fn validate_items(items: &[Item], depth: usize, names: &HashMap<&str, ()>, diags: &mut Vec<Diagnostic>) {
    for item in items {
        match item {
            Item::Block(b) => {
                if !is_identifier(&b.label) {
                    diags.push(Diagnostic::unplaced(
                        DiagnosticKind::InvalidName,
                        format!("block label '{}' is not an identifier", b.label),
                    ));
                }
                if b.duration_ms == 0 {
                    diags.push(Diagnostic::unplaced(
                        DiagnosticKind::NonPositiveDuration,
                        format!("block '{}': duration must be positive", b.label),
                    ));
                }
                for marker in std::iter::once(&b.onset_marker).chain(&b.offset_marker) {
                    if !names.contains_key(marker.as_str()) {
                        diags.push(Diagnostic::unplaced(
                            DiagnosticKind::UnknownMarker,
                            format!("block '{}': unknown marker '{marker}'", b.label),
                        ));
                    }
                }
            }
            Item::Repeat { count, items } => {
                if *count == 0 {
                    diags
                        .push(Diagnostic::unplaced(DiagnosticKind::NonPositiveRepeat, "repeat count must be positive"));
                }
                if depth + 1 > MAX_REPEAT_DEPTH {
                    diags.push(Diagnostic::unplaced(
                        DiagnosticKind::NestingTooDeep,
                        format!("repeat nesting deeper than {MAX_REPEAT_DEPTH}"),
                    ));
                }
                validate_items(items, depth + 1, names, diags);
            }
        }
    }
}

/// A flattened, runnable protocol. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    name: String,
    markers: Vec<MarkerCode>,
    blocks: Vec<Block>,
    codes: Vec<(u8, Option<u8>)>,
    event_count: usize,
}

impl Protocol {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn markers(&self) -> &[MarkerCode] {
        &self.markers
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Number of marker-emitting events: one per block plus one per offset marker.
    pub fn event_count(&self) -> usize {
        self.event_count
    }

    /// Resolved (onset, offset) codes of block `index`.
    pub fn block_codes(&self, index: usize) -> (u8, Option<u8>) {
        self.codes[index]
    }

    pub fn code_of(&self, name: &str) -> Option<u8> {
        self.markers.iter().find(|m| m.name == name).map(|m| m.code)
    }

    pub fn total_duration_ms(&self) -> u64 {
        self.blocks.iter().map(|b| b.duration_ms).sum()
    }

    /// Lazily walks the schedule in dispatch order without allocating.
    pub fn events(&self) -> ScheduledEvents<'_> {
        ScheduledEvents { protocol: self, block: 0, offset_pending: false, cursor_ms: 0 }
    }

    pub fn expected_timeline(&self) -> ExpectedTimeline {
        expected_timeline(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Onset,
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledEvent {
    pub block_index: usize,
    pub boundary: Boundary,
    pub offset_ms: u64,
    pub marker: u8,
}

pub struct ScheduledEvents<'a> {
    protocol: &'a Protocol,
    block: usize,
    offset_pending: bool,
    cursor_ms: u64,
}

impl Iterator for ScheduledEvents<'_> {
    type Item = ScheduledEvent;

    fn next(&mut self) -> Option<ScheduledEvent> {
        let block = self.protocol.blocks.get(self.block)?;
        let (onset, offset) = self.protocol.codes[self.block];
        if self.offset_pending {
            self.offset_pending = false;
            self.cursor_ms += block.duration_ms;
            let ev = ScheduledEvent {
                block_index: self.block,
                boundary: Boundary::Offset,
                offset_ms: self.cursor_ms,
                marker: offset.expect("offset pending without offset marker"),
            };
            self.block += 1;
            return Some(ev);
        }
        let ev = ScheduledEvent {
            block_index: self.block,
            boundary: Boundary::Onset,
            offset_ms: self.cursor_ms,
            marker: onset,
        };
        if offset.is_some() {
            self.offset_pending = true;
        } else {
            self.cursor_ms += block.duration_ms;
            self.block += 1;
        }
        Some(ev)
    }
}

/// Unrolls repeat groups depth-first and resolves marker names to codes.
pub fn expand(spec: &ProtocolSpec) -> Result<Protocol, ProtocolError> {
    spec.validate().map_err(ProtocolError::Invalid)?;
    let mut blocks = Vec::new();
    unroll(&spec.items, &mut blocks);
    if blocks.is_empty() {
        return Err(ProtocolError::Empty(spec.name.clone()));
    }
    let by_name: BTreeMap<&str, u8> = spec.markers.iter().map(|m| (m.name.as_str(), m.code)).collect();
    let codes = blocks
        .iter()
        .map(|b| (by_name[b.onset_marker.as_str()], b.offset_marker.as_deref().map(|m| by_name[m])))
        .collect();
    let event_count = blocks.iter().map(Block::event_count).sum();
    Ok(Protocol { name: spec.name.clone(), markers: spec.markers.clone(), blocks, codes, event_count })
}

fn unroll(items: &[Item], out: &mut Vec<Block>) {
    for item in items {
        match item {
            Item::Block(b) => out.push(b.clone()),
            Item::Repeat { count, items } => {
                for _ in 0..*count {
                    unroll(items, out);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEvent {
    pub offset_ms: u64,
    pub marker: u8,
    pub label: String,
}

/// When each marker must fire, as offsets from protocol start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectedTimeline {
    pub events: Vec<TimelineEvent>,
    pub total_duration_ms: u64,
}

pub fn expected_timeline(p: &Protocol) -> ExpectedTimeline {
    let events = p
        .events()
        .map(|ev| TimelineEvent {
            offset_ms: ev.offset_ms,
            marker: ev.marker,
            label: p.blocks[ev.block_index].label.clone(),
        })
        .collect();
    ExpectedTimeline { events, total_duration_ms: p.total_duration_ms() }
}
