//! Command-line surface. Every setting can come from a flag, a
//! `CARDIOLINK_*` environment variable, or the `--config` file, in that order.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use cardiolink::store::{Durability, SeriesStore};
use cardiolink::wire::DeviceId;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::replay::{self, Window};
use crate::scenario::ScenarioSpec;
use crate::settings::{LogPaths, Settings};
use crate::simulate::{self, SendOptions};

#[derive(Debug, Parser)]
#[command(name = "cardiolink", version, about = "ECG telemetry simulator, ingest service and viewer")]
pub struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true, env = "CARDIOLINK_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DurabilityArg {
    Flush,
    Sync,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// Service address (serve binds it, simulate connects to it).
    #[arg(long, global = true, env = "CARDIOLINK_LISTEN")]
    pub listen: Option<String>,
    /// Store directory.
    #[arg(long, global = true, env = "CARDIOLINK_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, env = "CARDIOLINK_DEVICE_BASE")]
    pub device_base: Option<DeviceId>,
    #[arg(long, global = true, env = "CARDIOLINK_FS")]
    pub fs: Option<u16>,
    #[arg(long, global = true, env = "CARDIOLINK_VREF")]
    pub vref: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run virtual devices and stream their frames.
    Simulate(SimulateArgs),
    /// Accept device connections, store, analyze and alert.
    Serve(ServeArgs),
    /// Render a stored time range as an annotated SVG.
    Plot(PlotArgs),
    /// Summarize a stored time range.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "CARDIOLINK_DEVICES")]
    pub devices: Option<u16>,
    /// Seconds of signal per device.
    #[arg(long, env = "CARDIOLINK_DURATION")]
    pub duration: Option<f64>,
    #[arg(long, env = "CARDIOLINK_SCENARIO")]
    pub scenario: Option<PathBuf>,
    /// Write `<dir>/<device>.frames` instead of connecting.
    #[arg(long, env = "CARDIOLINK_OFFLINE")]
    pub offline: Option<PathBuf>,
    #[arg(long, env = "CARDIOLINK_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Send frames at the device sample clock instead of as fast as possible.
    #[arg(long)]
    pub realtime: bool,
    /// Probability of skipping each frame (never the first or last).
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub drop_seed: u64,
    /// Appends one `<device> <seq>` line per skipped frame.
    #[arg(long)]
    pub drop_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CARDIOLINK_RULES")]
    pub rules: Option<PathBuf>,
    #[arg(long, env = "CARDIOLINK_WEBHOOK_URL")]
    pub webhook_url: Option<String>,
    #[arg(long, env = "CARDIOLINK_DURABILITY")]
    pub durability: Option<DurabilityArg>,
}

#[derive(Debug, Args)]
pub struct RangeArgs {
    /// Range start, Unix seconds.
    #[arg(long)]
    pub from: Option<f64>,
    /// Range end (exclusive), Unix seconds.
    #[arg(long)]
    pub to: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub device: DeviceId,
    #[command(flatten)]
    pub range: RangeArgs,
    /// Output path; `.svg` and `.txt` are written next to each other.
    #[arg(long, env = "CARDIOLINK_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Device to report; every stored device when omitted.
    #[arg(long)]
    pub device: Option<DeviceId>,
    #[command(flatten)]
    pub range: RangeArgs,
}

impl Cli {
    /// Defaults, then the config file, then flags and environment.
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        let c = &self.common;
        if let Some(v) = &c.listen {
            s.listen = v.clone();
        }
        if let Some(v) = &c.store {
            s.store = v.clone();
        }
        if let Some(v) = c.device_base {
            s.device_base = v;
        }
        if let Some(v) = c.fs {
            s.fs = v;
        }
        if let Some(v) = c.vref {
            s.vref = v;
        }
        match &self.command {
            Command::Simulate(a) => {
                if let Some(v) = a.devices {
                    s.devices = v;
                }
                if let Some(v) = a.duration {
                    s.duration_s = v;
                }
                if let Some(v) = &a.scenario {
                    s.scenario = Some(v.clone());
                }
                if let Some(v) = &a.offline {
                    s.offline = Some(v.clone());
                }
                if let Some(v) = a.batch_size {
                    s.batch_size = v;
                }
            }
            Command::Serve(a) => {
                if let Some(v) = &a.rules {
                    s.rules = Some(v.clone());
                }
                if let Some(v) = &a.webhook_url {
                    s.webhook_url = Some(v.clone());
                }
                if let Some(v) = a.durability {
                    s.durability = match v {
                        DurabilityArg::Flush => Durability::Flush,
                        DurabilityArg::Sync => Durability::Sync,
                    };
                }
            }
            Command::Plot(a) => {
                if let Some(v) = &a.out {
                    s.out = v.clone();
                }
            }
            Command::Report(_) => {}
        }
        if s.devices == 0 {
            return Err(CliError::Usage("need at least one device".into()));
        }
        if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
            return Err(CliError::Usage("duration must be positive".into()));
        }
        s.device_config(0)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(s)
    }
}

fn scenario(s: &Settings) -> Result<ScenarioSpec, CliError> {
    let Some(path) = &s.scenario else {
        return Ok(ScenarioSpec::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
    ScenarioSpec::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn simulate(s: &Settings, a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.drop_rate) {
        return Err(CliError::Usage("--drop-rate must be within 0..=1".into()));
    }
    let spec = scenario(s)?;
    let fleet = simulate::build_fleet(s, &spec)?;
    if let Some(dir) = &s.offline {
        for (dev, path) in fleet.iter().zip(simulate::write_offline(dir, &fleet)?) {
            let _ = writeln!(out, "{} frames {} -> {}", dev.device_id.to_hex(), dev.frames.len(), path.display());
        }
        return Ok(());
    }
    let opts = SendOptions {
        realtime: a.realtime,
        drop_rate: a.drop_rate,
        drop_seed: a.drop_seed,
    };
    let reports = simulate::send_fleet(&s.listen, &fleet, opts)?;
    let mut drop_lines = String::new();
    for r in &reports {
        let _ = writeln!(
            out,
            "{} sent {} frames {} samples dropped {}",
            r.device_id.to_hex(),
            r.frames_sent,
            r.samples_sent,
            r.dropped_seqs.len()
        );
        for seq in &r.dropped_seqs {
            drop_lines.push_str(&format!("{} {seq}\n", r.device_id.to_hex()));
        }
    }
    if let Some(path) = &a.drop_log {
        std::fs::write(path, drop_lines)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn serve(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone())
            .map_err(|e| CliError::Usage(format!("cannot install signal handler: {e}")))?;
    }
    let summary = crate::serve::run(s, stop, |addr| {
        let _ = writeln!(out, "listening on {addr}");
        let _ = out.flush();
    })?;
    let mut devices: Vec<_> = summary.ingest.devices.iter().collect();
    devices.sort_by_key(|(id, _)| **id);
    for (id, t) in devices {
        let _ = writeln!(
            out,
            "{} frames {} rejected {} duplicates {} missing {}",
            id.to_hex(),
            t.frames_ok,
            t.frames_rejected,
            t.duplicates,
            t.missing
        );
    }
    let _ = writeln!(
        out,
        "stopped: {} sessions, {} snapshots, {} alerts",
        summary.ingest.sessions_opened, summary.monitor.snapshots, summary.monitor.alerts
    );
    Ok(())
}

/// Opens an existing store for reading; `None` if there is nothing there.
fn open_existing(s: &Settings) -> Result<Option<SeriesStore>, CliError> {
    if !s.store.is_dir() {
        return Ok(None);
    }
    SeriesStore::open_with(&s.store, s.store_options())
        .map(|(store, _)| Some(store))
        .map_err(|e| CliError::Data(format!("cannot open store {}: {e}", s.store.display())))
}

fn plot(s: &Settings, a: &PlotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let window = Window::from_secs(a.range.from, a.range.to);
    let Some(store) = open_existing(s)? else {
        return Err(CliError::Data(format!("no data: store {} does not exist", s.store.display())));
    };
    let files = replay::plot(&store, a.device, window, s.analyzer_config(), &s.out)?;
    let _ = writeln!(
        out,
        "{} samples {} peaks -> {} {}",
        files.samples,
        files.peaks,
        files.svg.display(),
        files.sidecar.display()
    );
    Ok(())
}

fn report(s: &Settings, a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let window = Window::from_secs(a.range.from, a.range.to);
    let store = open_existing(s)?;
    let alert_log = LogPaths::under(&s.store).alerts;
    let ids = match (a.device, &store) {
        (Some(id), _) => vec![id],
        (None, Some(st)) => st.devices(),
        (None, None) => Vec::new(),
    };
    if ids.is_empty() {
        let empty = replay::Report {
            device_id: s.device_id(0),
            ..replay::Report::default()
        };
        let _ = write!(out, "{}", empty.render());
        return Ok(());
    }
    for id in ids {
        let rep = match &store {
            Some(st) => replay::report(st, id, window, s.analyzer_config(), &alert_log)?,
            None => replay::Report {
                device_id: id,
                ..replay::Report::default()
            },
        };
        let _ = write!(out, "{}", rep.render());
    }
    Ok(())
}

/// Runs the parsed command, writing its normal output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let s = cli.settings()?;
    match &cli.command {
        Command::Simulate(a) => simulate(&s, a, out),
        Command::Serve(_) => serve(&s, out),
        Command::Plot(a) => plot(&s, a, out),
        Command::Report(a) => report(&s, a, out),
    }
}
