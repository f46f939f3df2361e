//! `edgesim`: run the simulated device, run sessions, analyze results.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use edgesim_core::device::DeviceConfig;
use edgesim_core::experiment::{LogFormat, ScriptKind};
use edgesim_core::protocol::{ADDR_ENV, DEFAULT_ADDR};

mod analyze;
mod frames;
mod serve;
mod session;

#[derive(Debug, Parser)]
#[command(name = "edgesim", version, about = "Fingertip edge/surface haptic device simulator")]
struct Cli {
    /// Output style on stdout.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Structured,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve a simulated device over the line protocol.
    Serve(ServeArgs),
    /// Run a psychophysics session.
    Session(SessionArgs),
    /// Recompute statistics from logs and classify frame dumps.
    Analyze(AnalyzeArgs),
    /// Write a labelled corpus of settled frames, one file per condition.
    Frames(FramesArgs),
}

/// Accepts `host:port` with a non-empty host and a numeric port.
fn parse_addr(s: &str) -> Result<String, String> {
    let (host, port) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("`{s}` is not host:port"))?;
    if host.is_empty() {
        return Err(format!("`{s}` has no host"));
    }
    port.parse::<u16>()
        .map_err(|_| format!("`{port}` is not a port number"))?;
    Ok(s.to_string())
}

fn parse_bridge_url(s: &str) -> Result<String, String> {
    parse_addr(s.trim_start_matches("ws://").trim_end_matches('/'))?;
    Ok(s.to_string())
}

/// Prints `msg` with the subcommand's usage and exits with status 2.
pub(crate) fn usage_error(subcommand: &str, msg: impl std::fmt::Display) -> ! {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd
        .find_subcommand_mut(subcommand)
        .expect("known subcommand");
    sub.error(clap::error::ErrorKind::ValueValidation, msg).exit()
}

fn check_addresses(command: &Command) {
    let (name, checks): (&str, Vec<Result<String, String>>) = match command {
        Command::Serve(a) => (
            "serve",
            vec![parse_addr(&a.listen)]
                .into_iter()
                .chain(a.ui_bridge.as_deref().map(parse_addr))
                .collect(),
        ),
        Command::Session(a) => (
            "session",
            vec![parse_addr(&a.addr)]
                .into_iter()
                .chain(a.ui_bridge.as_deref().map(parse_bridge_url))
                .collect(),
        ),
        _ => return,
    };
    for c in checks {
        if let Err(msg) = c {
            usage_error(name, msg);
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<DeviceConfig> {
    Ok(match path {
        Some(p) => DeviceConfig::load(p)?,
        None => DeviceConfig::default(),
    })
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Listen address.
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    listen: String,
    /// Device configuration file (TOML); unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulated seconds per real second.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Also expose the WebSocket bridge for browser UIs on this address.
    #[arg(long)]
    ui_bridge: Option<String>,
}

#[derive(Debug, Args)]
struct SessionArgs {
    /// Device server address.
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    addr: String,
    /// Run against an in-process simulator on simulated time instead of a server.
    #[arg(long)]
    sim: bool,
    /// Device configuration for --sim.
    #[arg(long, requires = "sim")]
    config: Option<PathBuf>,
    /// Seed for the trial order (and the scripted responder).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// perfect, silent, or confusion:FROM->TO:p[,FROM->TO:p...]
    #[arg(long, default_value = "perfect")]
    responder: ScriptKind,
    /// Scripted response latency in seconds.
    #[arg(long)]
    latency: Option<f64>,
    /// Take responses from a UI connected to the bridge.
    #[arg(long, requires = "ui_bridge", conflicts_with = "sim")]
    live: bool,
    /// Bridge address for --live, e.g. ws://127.0.0.1:9902
    #[arg(long)]
    ui_bridge: Option<String>,
    #[arg(long, default_value_t = 5)]
    repetitions: u32,
    /// Inter-stimulus interval, seconds.
    #[arg(long, default_value_t = 3.0)]
    isi: f64,
    /// Seconds to wait for a response before recording none.
    #[arg(long, default_value_t = 30.0)]
    response_timeout: f64,
    /// Time scale the server was started with.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Trial log output.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    log_format: LogFormat,
    /// Statistics output (JSON).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Stream frames during the session at this rate (Hz); 10 Hz by default with --live.
    #[arg(long)]
    stream_hz: Option<f64>,
    /// Write streamed frames here.
    #[arg(long)]
    frames_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Session logs (CSV or structured JSON); records are pooled.
    #[arg(long = "log", num_args = 1..)]
    logs: Vec<PathBuf>,
    /// Frame files. Names ending in _EL, _EH, _SL, _SH or _NC are labelled.
    #[arg(long = "frames", num_args = 1..)]
    frames: Vec<PathBuf>,
    /// Export a heatmap of each frame file's peak frame here.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
    /// Also render heatmaps as PNG.
    #[arg(long, requires = "heatmap_dir")]
    png: bool,
}

#[derive(Debug, Args)]
struct FramesArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Frames per condition.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Sensor noise seed; defaults to the configured one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling rate, Hz.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// File name prefix.
    #[arg(long, default_value = "frames")]
    prefix: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    check_addresses(&cli.command);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let structured = cli.format == OutputFormat::Structured;
    let result = match cli.command {
        Command::Serve(a) => serve::run(a, structured),
        Command::Session(a) => session::run(a, structured),
        Command::Analyze(a) => analyze::run(a, structured),
        Command::Frames(a) => frames::run(a, structured),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
