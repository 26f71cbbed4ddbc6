//! Offline views over a store: annotated SVG plots and text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cardiolink::alerting::{AlertKind, AlertLogRecord};
use cardiolink::analysis::{AnalysisOutput, AnalyzerConfig, Block, DeviceAnalyzer, PeakAnnotation, Rhythm};
use cardiolink::jsonl::read_records;
use cardiolink::store::{EcgSampleBatch, SeriesStore};
use cardiolink::wire::{sample_offset_us, DeviceId};

use crate::error::CliError;

const LEAD_OFF_CODE: u16 = 1023;

/// Half-open time window in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub t0_us: u64,
    pub t1_us: u64,
}

impl Window {
    pub const ALL: Window = Window {
        t0_us: 0,
        t1_us: u64::MAX,
    };

    /// From optional bounds in seconds.
    pub fn from_secs(from: Option<f64>, to: Option<f64>) -> Self {
        let us = |s: f64| (s * 1e6).round().max(0.0) as u64;
        Window {
            t0_us: from.map_or(0, us),
            t1_us: to.map_or(u64::MAX, us),
        }
    }

    pub fn contains(&self, t_us: u64) -> bool {
        self.t0_us <= t_us && t_us < self.t1_us
    }
}

/// One stored sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t_us: u64,
    pub code: u16,
}

/// Samples, beats and snapshots of one device inside a window.
#[derive(Debug, Clone, Default)]
pub struct Replay {
    pub batches: Vec<EcgSampleBatch>,
    pub samples: Vec<Sample>,
    pub peaks: Vec<PeakAnnotation>,
    pub analysis: AnalysisOutput,
    /// Snapshot at the end of the last sample in range.
    pub final_snapshot: Option<cardiolink::analysis::VitalsSnapshot>,
}

/// A stored batch of all-1023 codes is what a lead-off frame looks like on disk.
fn is_lead_off(codes: &[u16]) -> bool {
    !codes.is_empty() && codes.iter().all(|&c| c == LEAD_OFF_CODE)
}

pub fn replay(store: &SeriesStore, id: DeviceId, w: Window, cfg: AnalyzerConfig) -> Result<Replay, CliError> {
    let batches = store
        .query(id, w.t0_us, w.t1_us)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut analyzer = DeviceAnalyzer::new(id, cfg);
    let mut out = AnalysisOutput::default();
    let mut samples = Vec::new();
    let mut end_us = None;
    for b in &batches {
        analyzer.push_block(
            Block {
                t_start_us: b.t_start_us,
                fs: b.fs,
                codes: &b.codes,
                lead_off: is_lead_off(&b.codes),
                sensors: None,
            },
            &mut out,
        );
        for (i, &code) in b.codes.iter().enumerate() {
            let t_us = b.t_start_us + sample_offset_us(i as u64, b.fs);
            if w.contains(t_us) {
                samples.push(Sample { t_us, code });
                end_us = Some(t_us + sample_offset_us(1, b.fs));
            }
        }
    }
    let peaks = out
        .peaks
        .iter()
        .copied()
        .filter(|p| w.contains((p.t * 1e6).round() as u64))
        .collect();
    let final_snapshot = end_us.map(|t| analyzer.snapshot_at(t));
    Ok(Replay {
        batches,
        samples,
        peaks,
        analysis: out,
        final_snapshot,
    })
}

pub const SVG_WIDTH: f64 = 1200.0;
pub const SVG_HEIGHT: f64 = 300.0;

/// Renders samples as one red polyline and each beat as a blue circle with
/// its time. Output depends only on the inputs.
pub fn render_svg(id: DeviceId, samples: &[Sample], peaks: &[PeakAnnotation]) -> String {
    let first = samples.first().map_or(0, |s| s.t_us);
    let last = samples.last().map_or(0, |s| s.t_us);
    let span = (last - first).max(1) as f64;
    let x = |t_us: u64| (t_us.saturating_sub(first)) as f64 / span * SVG_WIDTH;
    let y = |code: u16| SVG_HEIGHT - f64::from(code) / 1023.0 * SVG_HEIGHT;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SVG_WIDTH,
        h = SVG_HEIGHT + 20.0
    );
    let _ = writeln!(svg, "<title>ECG {}</title>", id.to_hex());
    svg.push_str(r#"<polyline fill="none" stroke="red" stroke-width="1" points=""#);
    for (i, s) in samples.iter().enumerate() {
        if i > 0 {
            svg.push(' ');
        }
        let _ = write!(svg, "{:.2},{:.2}", x(s.t_us), y(s.code));
    }
    svg.push_str("\"/>\n");
    for p in peaks {
        let t_us = (p.t * 1e6).round() as u64;
        // Nearest stored sample gives the circle its height.
        let k = samples.partition_point(|s| s.t_us < t_us);
        let near = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter_map(|i| samples.get(i))
            .min_by_key(|s| s.t_us.abs_diff(t_us));
        let cy = near.map_or(SVG_HEIGHT / 2.0, |s| y(s.code));
        let cx = x(t_us);
        let _ = writeln!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="blue"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="9" fill="blue">{:.3}</text>"#,
            SVG_HEIGHT + 14.0,
            p.t
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Sidecar listing each beat time and the heart rate at the end.
pub fn render_sidecar(id: DeviceId, r: &Replay) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "device {}", id.to_hex());
    let _ = writeln!(s, "samples {}", r.samples.len());
    let _ = writeln!(s, "peaks {}", r.peaks.len());
    for p in &r.peaks {
        let _ = writeln!(s, "peak {:.6}", p.t);
    }
    match r.final_snapshot.as_ref().and_then(|v| v.bpm) {
        Some(bpm) => {
            let _ = writeln!(s, "bpm {bpm:.2}");
        }
        None => s.push_str("bpm -\n"),
    }
    s
}

pub struct PlotFiles {
    pub svg: std::path::PathBuf,
    pub sidecar: std::path::PathBuf,
    pub samples: usize,
    pub peaks: usize,
}

/// Writes `<out>.svg` and `<out>.txt`. An empty window is a data error and
/// writes nothing.
pub fn plot(
    store: &SeriesStore,
    id: DeviceId,
    w: Window,
    cfg: AnalyzerConfig,
    out: &Path,
) -> Result<PlotFiles, CliError> {
    let r = replay(store, id, w, cfg)?;
    if r.samples.is_empty() {
        return Err(CliError::Data(format!("no data for device {} in range", id.to_hex())));
    }
    let svg = out.with_extension("svg");
    let sidecar = out.with_extension("txt");
    if let Some(dir) = svg.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(&svg, render_svg(id, &r.samples, &r.peaks))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", svg.display())))?;
    std::fs::write(&sidecar, render_sidecar(id, &r))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", sidecar.display())))?;
    Ok(PlotFiles {
        svg,
        sidecar,
        samples: r.samples.len(),
        peaks: r.peaks.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub device_id: DeviceId,
    pub samples: u64,
    pub records: u64,
    /// Holes between consecutive records longer than one sample, in seconds.
    pub gaps: Vec<(f64, f64)>,
    pub bpm_min: Option<f64>,
    pub bpm_mean: Option<f64>,
    pub bpm_max: Option<f64>,
    pub rhythms: BTreeMap<Rhythm, u64>,
    pub alerts: Vec<AlertLogRecord>,
}

pub fn report(
    store: &SeriesStore,
    id: DeviceId,
    w: Window,
    cfg: AnalyzerConfig,
    alert_log: &Path,
) -> Result<Report, CliError> {
    let r = replay(store, id, w, cfg)?;
    let mut rep = Report {
        device_id: id,
        samples: r.samples.len() as u64,
        records: r.batches.len() as u64,
        ..Report::default()
    };
    for pair in r.batches.windows(2) {
        let end = pair[0].t_end_us();
        if pair[1].t_start_us > end + sample_offset_us(1, pair[0].fs) / 2 {
            rep.gaps.push((end as f64 / 1e6, pair[1].t_start_us as f64 / 1e6));
        }
    }
    let in_range: Vec<_> = r
        .analysis
        .snapshots
        .iter()
        .filter(|s| w.contains((s.t * 1e6).round() as u64))
        .collect();
    let bpms: Vec<f64> = in_range.iter().filter_map(|s| s.bpm).collect();
    if !bpms.is_empty() {
        rep.bpm_min = bpms.iter().copied().reduce(f64::min);
        rep.bpm_max = bpms.iter().copied().reduce(f64::max);
        rep.bpm_mean = Some(bpms.iter().sum::<f64>() / bpms.len() as f64);
    }
    for s in &in_range {
        *rep.rhythms.entry(s.rhythm).or_default() += 1;
    }
    if alert_log.exists() {
        let hex = id.to_hex();
        let records: Vec<AlertLogRecord> =
            read_records(alert_log).map_err(|e| CliError::Data(format!("{}: {e}", alert_log.display())))?;
        rep.alerts = records
            .into_iter()
            .filter(|a| a.payload.device_id == hex && w.contains((a.payload.t * 1e6).round() as u64))
            .collect();
    }
    Ok(rep)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl Report {
    pub fn raises(&self, rule: &str) -> usize {
        self.count(rule, AlertKind::Raise)
    }

    pub fn clears(&self, rule: &str) -> usize {
        self.count(rule, AlertKind::Clear)
    }

    fn count(&self, rule: &str, kind: AlertKind) -> usize {
        self.alerts
            .iter()
            .filter(|a| a.payload.rule_id == rule && a.payload.kind == kind)
            .count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "device {}", self.device_id.to_hex());
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "records {}", self.records);
        let _ = writeln!(s, "gaps {}", self.gaps.len());
        for (a, b) in &self.gaps {
            let _ = writeln!(s, "gap {a:.6} {b:.6}");
        }
        let _ = writeln!(
            s,
            "bpm min {} mean {} max {}",
            opt(self.bpm_min),
            opt(self.bpm_mean),
            opt(self.bpm_max)
        );
        for r in Rhythm::ALL {
            let _ = writeln!(s, "rhythm {} {}", r, self.rhythms.get(&r).copied().unwrap_or(0));
        }
        let _ = writeln!(s, "alerts {}", self.alerts.len());
        for a in &self.alerts {
            let kind = match a.payload.kind {
                AlertKind::Raise => "raise",
                AlertKind::Clear => "clear",
            };
            let _ = writeln!(s, "alert {} {} {:.3}", a.payload.rule_id, kind, a.payload.t);
        }
        s
    }
}
