//! Control service configuration.
//!
//! ```toml
//! host = "127.0.0.1"
//! port = 8750
//! protocol_dir = "protocols"
//! output_dir = "sessions"
//! default_strategy = "deadline"
//! default_tolerance_ms = 50
//!
//! [acquisition]
//! sample_rate_hz = 2.0
//! accept_timeout_ms = 30000
//! ```
//!
//! Every key is optional. Command-line flags override the file, and the
//! `TRIGLINE_PORT` environment variable overrides `port`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trigline_core::Strategy;

pub const PORT_ENV: &str = "TRIGLINE_PORT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSettings {
    pub sample_rate_hz: f64,
    pub accept_timeout_ms: u64,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        Self { sample_rate_hz: trigline_core::acquisition::DEFAULT_SAMPLE_RATE_HZ, accept_timeout_ms: 30_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub protocol_dir: PathBuf,
    /// Per-session record files go here; none are written when unset.
    pub output_dir: Option<PathBuf>,
    pub default_strategy: Strategy,
    pub default_tolerance_ms: u64,
    pub acquisition: AcquisitionSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8750,
            protocol_dir: "protocols".into(),
            output_dir: None,
            default_strategy: Strategy::Deadline,
            default_tolerance_ms: trigline_core::verify::REAL_CLOCK_TOLERANCE_MS,
            acquisition: AcquisitionSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Checks that configured paths exist so the service fails at startup
    /// rather than on first use.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if !self.protocol_dir.is_dir() {
            problems.push(format!("protocol_dir {} is not a directory", self.protocol_dir.display()));
        }
        if let Some(dir) = &self.output_dir {
            if !dir.is_dir() {
                problems.push(format!("output_dir {} is not a directory", dir.display()));
            }
        }
        if self.acquisition.sample_rate_hz.is_nan() || self.acquisition.sample_rate_hz <= 0.0 {
            problems
                .push(format!("acquisition.sample_rate_hz must be positive, got {}", self.acquisition.sample_rate_hz));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ServiceConfig::from_toml("").unwrap(), ServiceConfig::default());
    }

    #[test]
    fn reads_all_keys() {
        let c = ServiceConfig::from_toml(
            "host = \"0.0.0.0\"\nport = 9000\nprotocol_dir = \"p\"\noutput_dir = \"o\"\n\
             default_strategy = \"naive\"\ndefault_tolerance_ms = 10\n[acquisition]\nsample_rate_hz = 10.0\n",
        )
        .unwrap();
        assert_eq!(
            (c.host.as_str(), c.port, c.default_strategy, c.default_tolerance_ms),
            ("0.0.0.0", 9000, Strategy::Naive, 10)
        );
        assert_eq!(c.output_dir, Some(PathBuf::from("o")));
        assert_eq!(c.acquisition.sample_rate_hz, 10.0);
        assert_eq!(c.acquisition.accept_timeout_ms, 30_000);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ServiceConfig::from_toml("prot = 1").is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let c = ServiceConfig { protocol_dir: "/nonexistent/protocols".into(), ..Default::default() };
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(m)) if m.contains("protocol_dir")));
    }
}
