//! Local control service.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/v1/protocols` | protocol files in the configured directory |
//! | POST | `/v1/sessions` | start a session |
//! | GET | `/v1/sessions/{id}` | session descriptor and state snapshot |
//! | POST | `/v1/sessions/{id}/control` | pause, resume, abort or manual marker |
//! | GET | `/v1/sessions/{id}/events` | server-sent event stream |
//! | GET | `/v1/sessions/{id}/report` | timing report once the session has ended |
//!
//! Each session runs on its own thread against the real clock. Commands
//! reach it through its ordered control channel and are acknowledged with
//! the resulting state; readers only ever see snapshots of the session
//! monitor, so a slow client cannot hold up the scheduler. At most one
//! session may be unfinished at a time.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use trigline_core::protocol::ProtocolError;
use trigline_core::scheduler::{
    ChannelControl, Command, ControlRequest, CsvEventWriter, EventRecorder, MonotonicClock, RecordedEvent, Session,
    SessionMonitor, SessionState,
};
use trigline_core::verify::{compare, cumulative_curve, CumulativeCurve, ObservedEvent};
use trigline_core::{expand, parse_protocol, Protocol, Strategy};

use crate::config::ServiceConfig;
use crate::sinks::{build_sinks, SinkSpec};

/// How long a control request waits for the session to acknowledge it.
pub const CONTROL_REPLY_TIMEOUT: Duration = Duration::from_secs(2);
/// How often an event stream checks the session for news.
pub const STREAM_POLL: Duration = Duration::from_millis(20);
/// Events included in a session descriptor.
pub const RECENT_EVENTS: usize = 10;

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    config: ServiceConfig,
    registry: Mutex<Registry>,
}

#[derive(Default)]
struct Registry {
    next_id: u64,
    sessions: BTreeMap<String, Arc<SessionHandle>>,
}

struct SessionHandle {
    id: String,
    protocol: Arc<Protocol>,
    strategy: Strategy,
    sinks: Vec<SinkSpec>,
    monitor: SessionMonitor,
    control: Mutex<mpsc::Sender<ControlRequest>>,
    record_path: Option<PathBuf>,
}

impl SessionHandle {
    fn finished(&self) -> bool {
        self.monitor.outcome().is_some()
    }

    fn descriptor(&self) -> Value {
        let count = self.monitor.event_count();
        let (outcome, failure) = match self.monitor.outcome() {
            Some((o, f)) => (Some(o), f),
            None => (None, None),
        };
        let blocks: Vec<Value> = self
            .protocol
            .blocks()
            .iter()
            .map(|b| json!({ "label": b.label, "kind": b.kind, "duration_ms": b.duration_ms }))
            .collect();
        json!({
            "id": self.id,
            "protocol": self.protocol.name(),
            "strategy": self.strategy,
            "sinks": self.sinks,
            "blocks": blocks,
            "expected_events": self.protocol.event_count(),
            "state": self.monitor.state(),
            "events_recorded": count,
            "last_events": self.monitor.events_since(count.saturating_sub(RECENT_EVENTS)),
            "outcome": outcome,
            "failure": failure,
            "record_path": self.record_path,
        })
    }
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self(Arc::new(Inner { config, registry: Mutex::new(Registry::default()) }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.0
            .registry
            .lock()
            .unwrap()
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session '{id}'")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn with(status: StatusCode, body: Value) -> Self {
        Self { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/protocols", get(list_protocols))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/control", post(control_session))
        .route("/v1/sessions/{id}/events", get(session_events))
        .route("/v1/sessions/{id}/report", get(session_report))
        .with_state(state)
}

/// Serves on an already-bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

#[derive(Serialize)]
struct ProtocolEntry {
    file: String,
    name: Option<String>,
    valid: bool,
    blocks: usize,
    events: usize,
    total_duration_ms: u64,
    diagnostics: Vec<String>,
}

fn protocol_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "proto"))
        .collect();
    files.sort();
    Ok(files)
}

fn compile(text: &str) -> Result<Protocol, Vec<String>> {
    let spec = parse_protocol(text).map_err(|d| d.iter().map(ToString::to_string).collect::<Vec<_>>())?;
    expand(&spec).map_err(|e| match e {
        ProtocolError::Invalid(d) => d.iter().map(ToString::to_string).collect(),
        other => vec![other.to_string()],
    })
}

async fn list_protocols(State(app): State<AppState>) -> Result<Json<Vec<ProtocolEntry>>, ApiError> {
    let dir = app.config().protocol_dir.clone();
    let files = protocol_files(&dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", dir.display())))?;
    let entries = files
        .iter()
        .map(|path| {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let compiled = std::fs::read_to_string(path).map_err(|e| vec![e.to_string()]).and_then(|t| compile(&t));
            match compiled {
                Ok(p) => ProtocolEntry {
                    file,
                    name: Some(p.name().to_string()),
                    valid: true,
                    blocks: p.blocks().len(),
                    events: p.event_count(),
                    total_duration_ms: p.total_duration_ms(),
                    diagnostics: Vec::new(),
                },
                Err(diagnostics) => ProtocolEntry {
                    file,
                    name: None,
                    valid: false,
                    blocks: 0,
                    events: 0,
                    total_duration_ms: 0,
                    diagnostics,
                },
            }
        })
        .collect();
    Ok(Json(entries))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Protocol name or file stem in the protocol directory.
    pub protocol: Option<String>,
    /// Inline protocol text, instead of `protocol`.
    pub source: Option<String>,
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub sinks: Vec<SinkSpec>,
}

fn find_protocol(dir: &Path, wanted: &str) -> Result<Protocol, ApiError> {
    let files = protocol_files(dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", dir.display())))?;
    for path in &files {
        let stem_matches = path.file_stem().is_some_and(|s| s == wanted);
        let Ok(text) = std::fs::read_to_string(path) else { continue };
        match compile(&text) {
            Ok(p) if stem_matches || p.name() == wanted => return Ok(p),
            Err(diagnostics) if stem_matches => {
                return Err(ApiError::with(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    json!({ "error": format!("protocol '{wanted}' is invalid"), "diagnostics": diagnostics }),
                ))
            }
            _ => {}
        }
    }
    Err(ApiError::new(StatusCode::NOT_FOUND, format!("no protocol '{wanted}'")))
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let worker = app.clone();
    tokio::task::spawn_blocking(move || start_session(&worker, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(|descriptor| (StatusCode::CREATED, Json(descriptor)).into_response())
}

struct CountOnly;

impl EventRecorder for CountOnly {
    fn record(&mut self, _event: RecordedEvent) {}
}

fn start_session(app: &AppState, req: CreateSession) -> Result<Value, ApiError> {
    let config = app.config();
    let protocol = match (&req.protocol, &req.source) {
        (Some(name), None) => find_protocol(&config.protocol_dir, name)?,
        (None, Some(text)) => compile(text).map_err(|diagnostics| {
            ApiError::with(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "protocol source is invalid", "diagnostics": diagnostics }),
            )
        })?,
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "give exactly one of 'protocol' or 'source'")),
    };
    let strategy = req.strategy.unwrap_or(config.default_strategy);

    // Held until the session is registered, so concurrent creates are
    // decided one at a time.
    let mut registry = app.0.registry.lock().unwrap();
    if let Some(active) = registry.sessions.values().find(|s| !s.finished()) {
        return Err(ApiError::with(
            StatusCode::CONFLICT,
            json!({ "error": "a session is already active", "active": active.id }),
        ));
    }
    let id = format!("s{}", registry.next_id + 1);
    let record_path = config.output_dir.as_ref().map(|d| d.join(format!("{id}.csv")));
    let recorder = match &record_path {
        Some(path) => Some(
            File::create(path)
                .map_err(|e| e.to_string())
                .and_then(|f| CsvEventWriter::new(BufWriter::new(f)).map_err(|e| e.to_string()))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut sink = build_sinks(&req.sinks, &protocol)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("cannot open sink: {e}")))?;
    registry.next_id += 1;

    let (tx, mut control) = ChannelControl::new();
    let handle = Arc::new(SessionHandle {
        id: id.clone(),
        protocol: Arc::new(protocol),
        strategy,
        sinks: req.sinks,
        monitor: SessionMonitor::new(),
        control: Mutex::new(tx),
        record_path,
    });
    let runner = handle.clone();
    std::thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || {
            let session = Session::new(&runner.protocol, runner.strategy).with_monitor(runner.monitor.clone());
            let mut clock = MonotonicClock::new();
            match recorder {
                Some(mut r) => {
                    session.run_into(&mut clock, &mut sink, &mut control, &mut r);
                    let _ = r.finish();
                }
                None => {
                    session.run_into(&mut clock, &mut sink, &mut control, &mut CountOnly);
                }
            }
            let _ = sink.close();
        })
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot start session: {e}")))?;
    registry.sessions.insert(id, handle.clone());
    Ok(handle.descriptor())
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(app.session(&id)?.descriptor()))
}

async fn control_session(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(command): Json<Command>,
) -> Result<Json<Value>, ApiError> {
    let handle = app.session(&id)?;
    if handle.finished() {
        return Err(ApiError::with(
            StatusCode::CONFLICT,
            json!({ "error": "session has ended", "state": handle.monitor.state() }),
        ));
    }
    let (reply_tx, reply_rx) = mpsc::channel();
    let sent = handle.control.lock().unwrap().send(ControlRequest { command, reply: Some(reply_tx) });
    if sent.is_err() {
        return Err(ApiError::new(StatusCode::CONFLICT, "session has ended"));
    }
    let reply = tokio::task::spawn_blocking(move || reply_rx.recv_timeout(CONTROL_REPLY_TIMEOUT))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match reply {
        Ok(Ok(state)) => Ok(Json(json!({ "accepted": command, "state": state }))),
        Ok(Err(rejection)) => {
            Err(ApiError::with(StatusCode::CONFLICT, json!({ "error": rejection.reason, "state": rejection.state })))
        }
        Err(_) => Err(ApiError::with(
            StatusCode::CONFLICT,
            json!({ "error": "session did not acknowledge the command", "state": handle.monitor.state() }),
        )),
    }
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    /// Id of the last event already seen.
    pub after: Option<usize>,
}

struct StreamCursor {
    handle: Arc<SessionHandle>,
    next: usize,
    last_state: Option<SessionState>,
    pending: std::collections::VecDeque<Event>,
    done: bool,
}

fn marker_event(index: usize, e: &RecordedEvent) -> Event {
    Event::default().event("marker").id(index.to_string()).json_data(e).expect("event serializes")
}

impl StreamCursor {
    /// Collects whatever happened since the last call.
    fn refill(&mut self) {
        // Outcome is read first: if the session had already finished, the
        // events fetched afterwards are guaranteed complete.
        let outcome = self.handle.monitor.outcome();
        let state = self.handle.monitor.state();
        for e in self.handle.monitor.events_since(self.next) {
            self.pending.push_back(marker_event(self.next, &e));
            self.next += 1;
        }
        if self.last_state != Some(state) {
            self.last_state = Some(state);
            self.pending.push_back(Event::default().event("state").json_data(state).expect("state serializes"));
        }
        if let Some((outcome, failure)) = outcome {
            let body = json!({ "outcome": outcome, "failure": failure, "state": state, "events": self.next });
            self.pending.push_back(Event::default().event("end").json_data(body).expect("end serializes"));
            self.done = true;
        }
    }
}

async fn session_events(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = app.session(&id)?;
    let last_seen = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .or(query.after);
    let cursor = StreamCursor {
        handle,
        next: last_seen.map_or(0, |n| n + 1),
        last_state: None,
        pending: Default::default(),
        done: false,
    };
    let stream = stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(ev) = c.pending.pop_front() {
                return Some((Ok(ev), c));
            }
            if c.done {
                return None;
            }
            c.refill();
            if c.pending.is_empty() {
                tokio::time::sleep(STREAM_POLL).await;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    pub tol: Option<u64>,
}

async fn session_report(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<ReportQuery>,
) -> Result<Json<Value>, ApiError> {
    let handle = app.session(&id)?;
    let Some((outcome, failure)) = handle.monitor.outcome() else {
        return Err(ApiError::with(
            StatusCode::CONFLICT,
            json!({ "error": "session is still running", "state": handle.monitor.state() }),
        ));
    };
    let tolerance_ms = query.tol.unwrap_or(app.config().default_tolerance_ms);
    let events = handle.monitor.events_since(0);
    let observed = ObservedEvent::from_record(&events);
    let expected = handle.protocol.expected_timeline();
    let (report, error) = match compare(&expected, &observed, tolerance_ms) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Json(json!({
        "id": handle.id,
        "protocol": handle.protocol.name(),
        "strategy": handle.strategy,
        "outcome": outcome,
        "failure": failure,
        "tolerance_ms": tolerance_ms,
        "report": report,
        "error": error,
        "curves": {
            "expected": CumulativeCurve::of_timeline(&expected).points,
            "actual": cumulative_curve(&observed).points,
        },
        "events": events,
    })))
}
