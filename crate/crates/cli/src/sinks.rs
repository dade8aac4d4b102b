//! `--sink` specifications.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use trigline_core::transport::{
    FanOutSink, FileSink, KeyEventSink, KeyInjector, KeyMap, LoopbackSink, NullSink, StreamSink,
};
use trigline_core::{MarkerSink, Protocol};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

/// One marker destination, written `KIND[:ARG]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SinkSpec {
    /// `file:PATH`, a CSV row per marker.
    File(PathBuf),
    /// `tcp:HOST:PORT`, length-delimited frames to a listener.
    Tcp(String),
    /// `stream:PATH`, raw frame bytes as a serial line would carry them.
    Stream(PathBuf),
    /// `keys`, emulated key presses printed to stdout.
    Keys,
    /// `null`, discards markers.
    Null,
}

impl FromStr for SinkSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let need = |a: Option<&str>| match a {
            Some(a) if !a.is_empty() => Ok(a.to_string()),
            _ => Err(format!("sink '{kind}' needs an argument, as in {kind}:VALUE")),
        };
        match kind {
            "file" => Ok(SinkSpec::File(need(arg)?.into())),
            "tcp" => {
                let addr = need(arg)?;
                if !addr.contains(':') {
                    return Err(format!("sink 'tcp' needs HOST:PORT, got '{addr}'"));
                }
                Ok(SinkSpec::Tcp(addr))
            }
            "stream" => Ok(SinkSpec::Stream(need(arg)?.into())),
            "keys" if arg.is_none() => Ok(SinkSpec::Keys),
            "null" if arg.is_none() => Ok(SinkSpec::Null),
            _ => Err(format!("unknown sink '{s}' (expected file:PATH, tcp:HOST:PORT, stream:PATH, keys or null)")),
        }
    }
}

impl TryFrom<String> for SinkSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SinkSpec> for String {
    fn from(s: SinkSpec) -> Self {
        s.to_string()
    }
}

impl std::fmt::Display for SinkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SinkSpec::File(p) => write!(f, "file:{}", p.display()),
            SinkSpec::Tcp(a) => write!(f, "tcp:{a}"),
            SinkSpec::Stream(p) => write!(f, "stream:{}", p.display()),
            SinkSpec::Keys => f.write_str("keys"),
            SinkSpec::Null => f.write_str("null"),
        }
    }
}

struct StdoutKeys;

impl KeyInjector for StdoutKeys {
    fn press(&mut self, key: &str) -> io::Result<()> {
        let mut out = io::stdout().lock();
        writeln!(out, "key {key}")?;
        out.flush()
    }
}

/// Opens every sink, failing before anything is sent if one cannot be built.
pub fn build_sinks(specs: &[SinkSpec], protocol: &Protocol) -> Result<Box<dyn MarkerSink>, String> {
    let mut sinks: Vec<Box<dyn MarkerSink>> = Vec::with_capacity(specs.len());
    for spec in specs {
        let sink: Box<dyn MarkerSink> = match spec {
            SinkSpec::File(path) => Box::new(FileSink::create(path).map_err(|e| format!("{spec}: {e}"))?),
            SinkSpec::Tcp(addr) => {
                Box::new(LoopbackSink::connect(addr.as_str(), CONNECT_TIMEOUT).map_err(|e| format!("{spec}: {e}"))?)
            }
            SinkSpec::Stream(path) => {
                let file = File::create(path).map_err(|e| format!("{spec}: {e}"))?;
                Box::new(StreamSink::new(BufWriter::new(file), spec.to_string()))
            }
            SinkSpec::Keys => {
                let map = KeyMap::for_protocol(protocol, &BTreeMap::new()).map_err(|codes| {
                    format!(
                        "keys: no key for marker codes {codes:?}; only rest/quiz/concept/feedback blocks have defaults"
                    )
                })?;
                Box::new(KeyEventSink::new(map, StdoutKeys))
            }
            SinkSpec::Null => Box::new(NullSink::default()),
        };
        sinks.push(sink);
    }
    Ok(match sinks.len() {
        0 => Box::new(NullSink::default()),
        1 => sinks.pop().unwrap(),
        _ => Box::new(FanOutSink::new(sinks)),
    })
}
