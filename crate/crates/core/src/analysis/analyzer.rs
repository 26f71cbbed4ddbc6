//! Per-device analysis over telemetry frames or stored sample batches.
//!
//! Contiguous blocks feed one detector; a time discontinuity, a change of
//! sampling rate or a lead-off block starts a fresh detector so that RR
//! intervals never span a hole in the data. Snapshots are emitted on fixed
//! wall-clock boundaries.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::qrs::{DetectorConfig, PeakAnnotation, QrsDetector};
use super::vitals::VitalsSnapshot;
use crate::device::Frontend;
use crate::wire::{sample_offset_us, DeviceId, TelemetryFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub frontend: Frontend,
    pub detector: DetectorConfig,
    pub snapshot_interval_us: u64,
    /// Only beats this recent contribute to a snapshot.
    pub lookback_s: f64,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            frontend: Frontend::default(),
            detector: DetectorConfig::default(),
            snapshot_interval_us: 1_000_000,
            lookback_s: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalysisOutput {
    pub peaks: Vec<PeakAnnotation>,
    pub snapshots: Vec<VitalsSnapshot>,
}

impl AnalysisOutput {
    pub fn append(&mut self, other: AnalysisOutput) {
        self.peaks.extend(other.peaks);
        self.snapshots.extend(other.snapshots);
    }
}

/// One run of consecutive samples.
#[derive(Debug, Clone, Copy)]
pub struct Block<'a> {
    pub t_start_us: u64,
    pub fs: u16,
    pub codes: &'a [u16],
    pub lead_off: bool,
    /// Temperature (°C) and alcohol level carried with the block, if any.
    pub sensors: Option<(f64, f64)>,
}

impl<'a> From<&'a TelemetryFrame> for Block<'a> {
    fn from(f: &'a TelemetryFrame) -> Self {
        Block {
            t_start_us: f.t_start_us,
            fs: f.fs,
            codes: &f.samples,
            lead_off: f.flags.lead_off(),
            sensors: Some((
                f64::from(f.temp_centi_c) / 100.0,
                f64::from(f.alcohol_permille) / 1000.0,
            )),
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    origin_us: u64,
    fs: u16,
    detector: QrsDetector,
    /// Samples fed so far.
    len: u64,
}

impl Segment {
    fn next_start_us(&self) -> u64 {
        self.origin_us + sample_offset_us(self.len, self.fs)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceAnalyzer {
    device_id: DeviceId,
    cfg: AnalyzerConfig,
    segment: Option<Segment>,
    /// Beats of the current segment still inside the lookback.
    recent: VecDeque<PeakAnnotation>,
    next_boundary_us: Option<u64>,
    lead_off_end_us: Option<u64>,
    temperature_c: Option<f64>,
    alcohol_level: Option<f64>,
}

impl DeviceAnalyzer {
    pub fn new(device_id: DeviceId, cfg: AnalyzerConfig) -> Self {
        Self {
            device_id,
            cfg,
            segment: None,
            recent: VecDeque::new(),
            next_boundary_us: None,
            lead_off_end_us: None,
            temperature_c: None,
            alcohol_level: None,
        }
    }

    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn push_frame(&mut self, frame: &TelemetryFrame, out: &mut AnalysisOutput) {
        self.push_block(Block::from(frame), out);
    }

    pub fn push_block(&mut self, block: Block<'_>, out: &mut AnalysisOutput) {
        if block.fs == 0 {
            return;
        }
        let interval = self.cfg.snapshot_interval_us;
        if self.next_boundary_us.is_none() {
            self.next_boundary_us = Some((block.t_start_us / interval + 1) * interval);
        }

        let contiguous = self.segment.as_ref().is_some_and(|s| {
            s.fs == block.fs
                && s.next_start_us().abs_diff(block.t_start_us)
                    <= sample_offset_us(1, block.fs) / 2
        });
        if !contiguous {
            self.segment = None;
            self.recent.clear();
        }

        if block.lead_off {
            self.lead_off_end_us = Some(
                block.t_start_us + sample_offset_us(block.codes.len() as u64, block.fs),
            );
            self.segment = None;
            self.recent.clear();
        }

        if let Some((temp, alcohol)) = block.sensors {
            // Sensor values describe the block; earlier boundaries keep the old ones.
            self.emit_until(block.t_start_us, out);
            self.temperature_c = Some(temp);
            self.alcohol_level = Some(alcohol);
        }

        if block.lead_off {
            for i in 1..=block.codes.len() as u64 {
                self.emit_until(block.t_start_us + sample_offset_us(i, block.fs), out);
            }
            return;
        }

        let seg = self.segment.get_or_insert_with(|| Segment {
            origin_us: block.t_start_us,
            fs: block.fs,
            detector: QrsDetector::with_config(
                f64::from(block.fs),
                block.t_start_us as f64 / 1e6,
                self.cfg.detector,
            ),
            len: 0,
        });
        let origin_us = seg.origin_us;
        let fs = seg.fs;
        let frontend = self.cfg.frontend;
        let mut found = Vec::new();
        for &code in block.codes {
            let seg = self.segment.as_mut().expect("segment just ensured");
            seg.detector.push(frontend.code_to_mv(code), &mut found);
            seg.len += 1;
            let next_us = origin_us + sample_offset_us(seg.len, fs);
            if !found.is_empty() {
                for p in found.drain(..) {
                    self.recent.push_back(p);
                    out.peaks.push(p);
                }
            }
            self.emit_until(next_us, out);
        }
    }

    /// Emits every pending boundary at or before `t_us`.
    fn emit_until(&mut self, t_us: u64, out: &mut AnalysisOutput) {
        while let Some(b) = self.next_boundary_us {
            if b > t_us {
                break;
            }
            let snap = self.snapshot_at(b);
            out.snapshots.push(snap);
            self.next_boundary_us = Some(b + self.cfg.snapshot_interval_us);
        }
    }

    /// Vitals for the window ending at `t_us`, from beats seen so far.
    pub fn snapshot_at(&mut self, t_us: u64) -> VitalsSnapshot {
        let t = t_us as f64 / 1e6;
        let from = t - self.cfg.lookback_s;
        while self.recent.front().is_some_and(|p| p.t <= from) {
            self.recent.pop_front();
        }
        let fs = self.segment.as_ref().map_or(1.0, |s| f64::from(s.fs));
        let beats: Vec<u64> = self
            .recent
            .iter()
            .filter(|p| p.t <= t)
            .map(|p| p.index)
            .collect();
        let rr: Vec<f64> = beats.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
        let window_start = t_us.saturating_sub(self.cfg.snapshot_interval_us);
        let lead_ok = !self.lead_off_end_us.is_some_and(|end| end > window_start);
        VitalsSnapshot::from_rr(
            self.device_id,
            t,
            &rr,
            self.temperature_c,
            self.alcohol_level,
            lead_ok,
        )
    }
}

/// Analyzes a device's whole frame sequence in one go.
pub fn analyze_frames(
    device_id: DeviceId,
    frames: &[TelemetryFrame],
    cfg: AnalyzerConfig,
) -> AnalysisOutput {
    let mut analyzer = DeviceAnalyzer::new(device_id, cfg);
    let mut out = AnalysisOutput::default();
    for f in frames {
        analyzer.push_frame(f, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::vitals::Rhythm;
    use crate::device::{run_device, DeviceConfig, LeadOffWindow, LeadState, Scenario};
    use crate::device::SensorTrajectory;
    use crate::ecg_synth::{generate, Morphology, NoiseSpec, RhythmMode, RhythmPlan};

    const START_US: u64 = 1_700_000_000_000_000;

    fn frames(bpm: f64, duration: f64, batch: usize, lead_off: Vec<LeadOffWindow>) -> Vec<TelemetryFrame> {
        let cfg = DeviceConfig {
            batch_size: batch,
            ..DeviceConfig::default()
        };
        let signal = generate(
            duration,
            250.0,
            &RhythmPlan::new(bpm, 0.0, RhythmMode::Normal, 4),
            &Morphology::default(),
            &NoiseSpec::none(),
        )
        .unwrap();
        let scenario = Scenario {
            signal,
            sensors: SensorTrajectory::default(),
            lead_off,
            start_time_us: START_US,
        };
        run_device(&cfg, &scenario, duration).unwrap().frames
    }

    #[test]
    fn steady_rate_is_reported() {
        let out = analyze_frames(DeviceId::default(), &frames(72.0, 30.0, 250, vec![]), AnalyzerConfig::default());
        assert_eq!(out.snapshots.len(), 30);
        let last = out.snapshots.last().unwrap();
        assert!((last.bpm.unwrap() - 72.0).abs() < 1.0);
        assert_eq!(last.rhythm, Rhythm::NormalSinus);
        assert_eq!(last.temperature_c, Some(37.0));
        assert!(out.snapshots[0].bpm.is_none());
        for s in &out.snapshots {
            if let (Some(b), Some(m)) = (s.bpm, s.rr_mean) {
                assert!((b * m - 60.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_size_does_not_change_output() {
        let a = analyze_frames(DeviceId::default(), &frames(65.0, 20.0, 250, vec![]), AnalyzerConfig::default());
        let b = analyze_frames(DeviceId::default(), &frames(65.0, 20.0, 7, vec![]), AnalyzerConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn lead_off_forces_indeterminate() {
        let window = LeadOffWindow {
            from_s: 10.0,
            to_s: 12.0,
            lead: LeadState {
                lo_plus: true,
                lo_minus: false,
            },
        };
        let out = analyze_frames(DeviceId::default(), &frames(72.0, 30.0, 250, vec![window]), AnalyzerConfig::default());
        let at = |sec: u64| {
            out.snapshots
                .iter()
                .find(|s| (s.t - (START_US / 1_000_000 + sec) as f64).abs() < 1e-6)
                .unwrap()
        };
        assert!(at(9).lead_ok);
        assert!(!at(11).lead_ok);
        assert_eq!(at(11).rhythm, Rhythm::Indeterminate);
        assert_eq!(at(12).rhythm, Rhythm::Indeterminate);
        assert!(!at(12).lead_ok);
        assert_eq!(at(25).rhythm, Rhythm::NormalSinus);
        let lead_off_span = (START_US as f64 / 1e6 + 10.0)..(START_US as f64 / 1e6 + 12.0);
        assert!(out.peaks.iter().all(|p| !lead_off_span.contains(&p.t)));
    }

    #[test]
    fn gap_restarts_rr_history() {
        let mut fs = frames(60.0, 30.0, 250, vec![]);
        fs.remove(10);
        let out = analyze_frames(DeviceId::default(), &fs, AnalyzerConfig::default());
        for s in &out.snapshots {
            if let Some(bpm) = s.bpm {
                assert!((bpm - 60.0).abs() < 1.0, "bpm {bpm} at {}", s.t);
            }
        }
    }
}
