use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;

use super::{encode_frame, MarkerFrame, MarkerSink, SinkError};
use crate::protocol::{BlockKind, Protocol};

/// Raw encoded frames on any byte stream: a serial port device, a pipe, a file.
pub struct StreamSink<W> {
    writer: Option<W>,
    label: String,
}

impl<W: Write + Send> StreamSink<W> {
    pub fn new(writer: W, label: impl Into<String>) -> Self {
        Self { writer: Some(writer), label: label.into() }
    }

    pub fn into_inner(self) -> Option<W> {
        self.writer
    }
}

impl<W: Write + Send> MarkerSink for StreamSink<W> {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        let w = self.writer.as_mut().ok_or(SinkError::Closed)?;
        let bytes = encode_frame(frame)?;
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    fn close(&mut self) -> Result<(), SinkError> {
        if let Some(mut w) = self.writer.take() {
            w.flush()?;
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("stream:{}", self.label)
    }
}

/// Length-delimited frames over a local TCP connection: a big-endian u16
/// byte count followed by the encoded frame.
pub struct LoopbackSink {
    stream: Option<TcpStream>,
    peer: SocketAddr,
}

impl LoopbackSink {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> io::Result<Self> {
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing");
        for peer in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&peer, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self { stream: Some(stream), peer });
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }
}

/// Writes one length-delimited message.
pub fn write_delimited(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len =
        u16::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "payload too long"))?;
    let mut msg = [0u8; 2 + super::LONG_FRAME_LEN];
    if payload.len() <= super::LONG_FRAME_LEN {
        msg[..2].copy_from_slice(&len.to_be_bytes());
        msg[2..2 + payload.len()].copy_from_slice(payload);
        w.write_all(&msg[..2 + payload.len()])
    } else {
        w.write_all(&len.to_be_bytes())?;
        w.write_all(payload)
    }
}

impl MarkerSink for LoopbackSink {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        let stream = self.stream.as_mut().ok_or(SinkError::Closed)?;
        let bytes = encode_frame(frame)?;
        write_delimited(stream, &bytes)?;
        Ok(())
    }

    fn close(&mut self) -> Result<(), SinkError> {
        if let Some(stream) = self.stream.take() {
            stream.shutdown(std::net::Shutdown::Write)?;
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("tcp:{}", self.peer)
    }
}

/// Marker code to key symbol.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KeyMap(pub BTreeMap<u8, String>);

impl KeyMap {
    pub fn default_key(kind: BlockKind) -> Option<&'static str> {
        match kind {
            BlockKind::Rest => Some("r"),
            BlockKind::Quiz => Some("q"),
            BlockKind::Concept => Some("c"),
            BlockKind::Feedback => Some("f"),
            BlockKind::Custom => None,
        }
    }

    /// Keys for every code `protocol` emits: `overrides` first, then the
    /// block-kind default for onset codes. Returns the unmapped codes on failure.
    pub fn for_protocol(protocol: &Protocol, overrides: &BTreeMap<u8, String>) -> Result<Self, Vec<u8>> {
        let mut map = BTreeMap::new();
        for (i, block) in protocol.blocks().iter().enumerate() {
            let (onset, offset) = protocol.block_codes(i);
            if let Some(key) =
                overrides.get(&onset).cloned().or_else(|| Self::default_key(block.kind).map(String::from))
            {
                map.entry(onset).or_insert(key);
            }
            if let Some(key) = offset.and_then(|c| overrides.get(&c)) {
                map.entry(offset.unwrap_or_default()).or_insert_with(|| key.clone());
            }
        }
        let km = KeyMap(map);
        km.covers(protocol).map(|()| km)
    }

    /// Checks that every code the protocol can emit has a key.
    pub fn covers(&self, protocol: &Protocol) -> Result<(), Vec<u8>> {
        let mut missing: Vec<u8> = protocol.events().map(|e| e.marker).filter(|c| !self.0.contains_key(c)).collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(missing)
        }
    }
}

/// Where emulated key presses go.
pub trait KeyInjector: Send {
    fn press(&mut self, key: &str) -> io::Result<()>;
}

/// In-process key injector: an observable, shareable log of pressed keys.
#[derive(Debug, Clone, Default)]
pub struct KeyLog(Arc<Mutex<Vec<String>>>);

impl KeyLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keys(&self) -> Vec<String> {
        self.0.lock().unwrap().clone()
    }
}

impl KeyInjector for KeyLog {
    fn press(&mut self, key: &str) -> io::Result<()> {
        self.0.lock().unwrap().push(key.to_string());
        Ok(())
    }
}

pub struct KeyEventSink {
    mapping: KeyMap,
    injector: Box<dyn KeyInjector>,
    open: bool,
}

impl KeyEventSink {
    pub fn new(mapping: KeyMap, injector: impl KeyInjector + 'static) -> Self {
        Self { mapping, injector: Box::new(injector), open: true }
    }

    /// Sink that records into an in-process [`KeyLog`], returned alongside.
    pub fn with_log(mapping: KeyMap) -> (Self, KeyLog) {
        let log = KeyLog::new();
        (Self::new(mapping, log.clone()), log)
    }

    pub fn mapping(&self) -> &KeyMap {
        &self.mapping
    }
}

impl MarkerSink for KeyEventSink {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        if !self.open {
            return Err(SinkError::Closed);
        }
        let key = self.mapping.0.get(&frame.code).ok_or(SinkError::UnmappedCode(frame.code))?;
        self.injector.press(key)?;
        Ok(())
    }

    fn close(&mut self) -> Result<(), SinkError> {
        self.open = false;
        Ok(())
    }

    fn describe(&self) -> String {
        "keys".to_string()
    }
}

#[derive(Debug, Serialize)]
struct FileRow {
    seq: u16,
    code: u8,
    ts_ms: Option<u32>,
}

/// Appends one `seq,code,ts_ms` CSV row per frame, flushed immediately.
pub struct FileSink {
    writer: Option<csv::Writer<BufWriter<File>>>,
    path: PathBuf,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, SinkError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        writer.write_record(["seq", "code", "ts_ms"])?;
        writer.flush()?;
        Ok(Self { writer: Some(writer), path })
    }
}

impl MarkerSink for FileSink {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        let w = self.writer.as_mut().ok_or(SinkError::Closed)?;
        w.serialize(FileRow { seq: frame.seq, code: frame.code, ts_ms: frame.ts_ms })?;
        w.flush()?;
        Ok(())
    }

    fn close(&mut self) -> Result<(), SinkError> {
        if let Some(mut w) = self.writer.take() {
            w.flush()?;
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("file:{}", self.path.display())
    }
}

/// Delivers to every child in order; any child failure makes the send fail
/// as [`SinkError::Partial`] after the remaining children were still tried.
pub struct FanOutSink {
    children: Vec<Box<dyn MarkerSink>>,
}

impl FanOutSink {
    pub fn new(children: Vec<Box<dyn MarkerSink>>) -> Self {
        Self { children }
    }
}

impl MarkerSink for FanOutSink {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        let mut failures = Vec::new();
        let mut delivered = 0;
        for child in &mut self.children {
            match child.send(frame) {
                Ok(()) => delivered += 1,
                Err(e) => failures.push((child.describe(), e)),
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(SinkError::Partial { delivered, failures })
        }
    }

    fn close(&mut self) -> Result<(), SinkError> {
        let mut failures = Vec::new();
        let mut delivered = 0;
        for child in &mut self.children {
            match child.close() {
                Ok(()) => delivered += 1,
                Err(e) => failures.push((child.describe(), e)),
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(SinkError::Partial { delivered, failures })
        }
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self.children.iter().map(|c| c.describe()).collect();
        format!("fanout[{}]", parts.join(","))
    }
}

/// Keeps every frame in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    frames: Arc<Mutex<Vec<MarkerFrame>>>,
    closed: Arc<Mutex<bool>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames(&self) -> Vec<MarkerFrame> {
        self.frames.lock().unwrap().clone()
    }
}

impl MarkerSink for MemorySink {
    fn send(&mut self, frame: &MarkerFrame) -> Result<(), SinkError> {
        if *self.closed.lock().unwrap() {
            return Err(SinkError::Closed);
        }
        self.frames.lock().unwrap().push(*frame);
        Ok(())
    }

    fn close(&mut self) -> Result<(), SinkError> {
        *self.closed.lock().unwrap() = true;
        Ok(())
    }

    fn describe(&self) -> String {
        "memory".to_string()
    }
}

/// Discards frames, counting them.
#[derive(Debug, Default)]
pub struct NullSink {
    pub sent: u64,
}

impl MarkerSink for NullSink {
    fn send(&mut self, _frame: &MarkerFrame) -> Result<(), SinkError> {
        self.sent += 1;
        Ok(())
    }

    fn describe(&self) -> String {
        "null".to_string()
    }
}
