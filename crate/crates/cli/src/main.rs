use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use trigline::commands::{self, ListenOptions, RunOptions, SimulateOptions, VerifyOptions};
use trigline::config::{AcquisitionSettings, ServiceConfig, PORT_ENV};
use trigline::service::{serve_on, AppState};
use trigline::sinks::SinkSpec;
use trigline::{exit, CliError};
use trigline_core::scheduler::{ChannelControl, Command};
use trigline_core::verify::{LOGICAL_TOLERANCE_MS, REAL_CLOCK_TOLERANCE_MS};
use trigline_core::Strategy;

#[derive(Parser)]
#[command(name = "trigline", version, about = "Run block-design protocols and send timed event markers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a protocol file; exit 2 on any diagnostic.
    Validate { protocol: PathBuf },
    /// Run a protocol on the real clock, sending markers to every sink.
    Run {
        protocol: PathBuf,
        #[arg(long, default_value = "deadline")]
        strategy: Strategy,
        /// file:PATH, tcp:HOST:PORT, stream:PATH, keys or null; repeatable.
        #[arg(long = "sink")]
        sinks: Vec<SinkSpec>,
        /// Execution record CSV, written row by row.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run a protocol on a simulated clock and report timing.
    Simulate {
        protocol: PathBuf,
        #[arg(long, default_value = "deadline")]
        strategy: Strategy,
        /// Time each marker send costs.
        #[arg(long, default_value_t = 0)]
        overhead_ms: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = LOGICAL_TOLERANCE_MS)]
        tol: u64,
    },
    /// Compare an execution record or receiver log with a protocol's expected timeline.
    Verify {
        protocol: PathBuf,
        actual: PathBuf,
        #[arg(long, default_value_t = REAL_CLOCK_TOLERANCE_MS)]
        tol: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Act as the acquisition host: receive markers from one sender.
    Listen {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// 0 picks a free port.
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Samples per second; defaults to the config file's setting, else 2.
        #[arg(long)]
        rate: Option<f64>,
        /// Recording length; defaults to the protocol's length when --protocol is given.
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Seconds to wait for a sender; defaults to the config file's setting, else 30.
        #[arg(long)]
        timeout: Option<f64>,
        /// Seconds of sender silence before giving up.
        #[arg(long)]
        idle_timeout: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Service configuration whose [acquisition] table supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Start the local control service.
    Serve {
        /// TOML configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<IpAddr>,
        #[arg(long, env = PORT_ENV)]
        port: Option<u16>,
        #[arg(long)]
        protocol_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        tol: Option<u64>,
    },
}

fn seconds(s: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(s).map_err(|e| CliError::validation(format!("bad timeout {s}: {e}")))
}

fn dispatch(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::Validate { protocol } => commands::validate(&protocol),
        Cmd::Run { protocol, strategy, sinks, record } => {
            let (tx, mut control) = ChannelControl::new();
            ctrlc::set_handler(move || {
                let _ = tx.send(Command::Abort.into());
            })
            .map_err(|e| CliError::setup(format!("cannot install interrupt handler: {e}")))?;
            commands::run(&RunOptions { protocol, strategy, sinks, record }, &mut control)
        }
        Cmd::Simulate { protocol, strategy, overhead_ms, out, tol } => {
            commands::simulate(&SimulateOptions { protocol, strategy, overhead_ms, out, tolerance_ms: tol })
        }
        Cmd::Verify { protocol, actual, tol, out } => {
            commands::verify(&VerifyOptions { protocol, actual, tolerance_ms: tol, out })
        }
        Cmd::Listen { host, port, rate, duration_ms, protocol, timeout, idle_timeout, out, config } => {
            let defaults = match &config {
                Some(path) => ServiceConfig::load(path).map_err(|e| CliError::setup(e.to_string()))?.acquisition,
                None => AcquisitionSettings::default(),
            };
            let accept_timeout = match timeout {
                Some(t) => seconds(t)?,
                None => Duration::from_millis(defaults.accept_timeout_ms),
            };
            commands::listen(&ListenOptions {
                bind: SocketAddr::new(host, port),
                sample_rate_hz: rate.unwrap_or(defaults.sample_rate_hz),
                duration_ms,
                protocol,
                accept_timeout,
                idle_timeout: idle_timeout.map(seconds).transpose()?,
                out,
            })
        }
        Cmd::Serve { config, host, port, protocol_dir, output_dir, strategy, tol } => {
            let mut cfg = match &config {
                Some(path) => ServiceConfig::load(path).map_err(|e| CliError::setup(e.to_string()))?,
                None => ServiceConfig::default(),
            };
            if let Some(h) = host {
                cfg.host = h.to_string();
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(d) = protocol_dir {
                cfg.protocol_dir = d;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = Some(d);
            }
            if let Some(s) = strategy {
                cfg.default_strategy = s;
            }
            if let Some(t) = tol {
                cfg.default_tolerance_ms = t;
            }
            serve(cfg)
        }
    }
}

fn serve(cfg: ServiceConfig) -> Result<u8, CliError> {
    cfg.validate().map_err(|e| CliError::setup(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::setup(e.to_string()))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::setup(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::setup(e.to_string()))?;
        println!("serving on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve_on(listener, AppState::new(cfg), shutdown).await.map_err(|e| CliError::setup(e.to_string()))?;
        Ok(exit::OK)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
