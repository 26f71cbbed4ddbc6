//! `simulate`: run N virtual devices and stream their frames, or write them
//! to disk with `--offline`.

use std::fs;
use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use cardiolink::device::run_device;
use cardiolink::wire::{encode_into, DeviceId, TelemetryFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::scenario::ScenarioSpec;
use crate::settings::Settings;

#[derive(Debug, Clone)]
pub struct DeviceFrames {
    pub device_id: DeviceId,
    pub frames: Vec<TelemetryFrame>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SendOptions {
    /// Pace frames at the device's own sample clock.
    pub realtime: bool,
    /// Probability of silently skipping a frame. The first and last frame of
    /// each device are always sent.
    pub drop_rate: f64,
    pub drop_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SendReport {
    pub device_id: DeviceId,
    pub frames_sent: u64,
    pub samples_sent: u64,
    pub dropped_seqs: Vec<u32>,
}

pub fn build_fleet(settings: &Settings, spec: &ScenarioSpec) -> Result<Vec<DeviceFrames>, CliError> {
    (0..settings.devices)
        .map(|i| {
            let cfg = settings.device_config(i);
            let scenario = spec
                .build(i, settings.duration_s, f64::from(settings.fs))
                .map_err(CliError::Usage)?;
            let run = run_device(&cfg, &scenario, settings.duration_s)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(DeviceFrames {
                device_id: cfg.device_id,
                frames: run.frames,
            })
        })
        .collect()
}

pub fn offline_path(dir: &Path, id: DeviceId) -> PathBuf {
    dir.join(format!("{}.frames", id.to_hex()))
}

/// Writes each device's encoded frame stream to `<dir>/<device>.frames`.
pub fn write_offline(dir: &Path, fleet: &[DeviceFrames]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for dev in fleet {
        let mut buf = Vec::new();
        for f in &dev.frames {
            encode_into(f, &mut buf).map_err(|e| CliError::Data(e.to_string()))?;
        }
        let path = offline_path(dir, dev.device_id);
        fs::write(&path, &buf)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

fn connect(addr: &str) -> Result<TcpStream, CliError> {
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| CliError::Connectivity(format!("cannot resolve {addr}: {e}")))?
        .collect();
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(3)) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(CliError::Connectivity(match last {
        Some(e) => format!("cannot connect to {addr}: {e}"),
        None => format!("{addr} resolved to no address"),
    }))
}

fn send_device(
    mut stream: TcpStream,
    dev: &DeviceFrames,
    opts: SendOptions,
    seed: u64,
) -> Result<SendReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SendReport {
        device_id: dev.device_id,
        ..SendReport::default()
    };
    let started = Instant::now();
    let origin_us = dev.frames.first().map_or(0, |f| f.t_start_us);
    let last = dev.frames.len().saturating_sub(1);
    let mut buf = Vec::new();
    for (i, f) in dev.frames.iter().enumerate() {
        if opts.realtime {
            let due = Duration::from_micros(f.t_end_us().saturating_sub(origin_us));
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                thread::sleep(wait);
            }
        }
        if i != 0 && i != last && opts.drop_rate > 0.0 && rng.random_bool(opts.drop_rate.min(1.0)) {
            report.dropped_seqs.push(f.seq);
            continue;
        }
        buf.clear();
        encode_into(f, &mut buf).map_err(|e| CliError::Data(e.to_string()))?;
        stream.write_all(&buf).map_err(|e| {
            CliError::Connectivity(format!("device {}: send failed: {e}", dev.device_id.to_hex()))
        })?;
        report.frames_sent += 1;
        report.samples_sent += f.samples.len() as u64;
    }
    stream
        .flush()
        .map_err(|e| CliError::Connectivity(e.to_string()))?;
    Ok(report)
}

/// Streams every device over its own connection.
///
/// All connections are opened before any frame is sent, so an unreachable
/// service fails the run without partial traffic.
pub fn send_fleet(addr: &str, fleet: &[DeviceFrames], opts: SendOptions) -> Result<Vec<SendReport>, CliError> {
    let streams = fleet
        .iter()
        .map(|_| connect(addr))
        .collect::<Result<Vec<_>, _>>()?;
    thread::scope(|scope| {
        let handles: Vec<_> = fleet
            .iter()
            .zip(streams)
            .enumerate()
            .map(|(i, (dev, s))| {
                let seed = opts.drop_seed.wrapping_add(i as u64);
                scope.spawn(move || send_device(s, dev, opts, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sender thread panicked"))
            .collect()
    })
}
