//! Emulated acquisition node.
//!
//! Samples an [`AnnotatedSignal`] through a 10-bit ADC, polls a DHT11-style
//! temperature sensor and a normalized alcohol sensor, tracks lead-off state
//! and the local buzzer/display, and packs everything into telemetry frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerting::defaults as alert_defaults;
use crate::ecg_synth::AnnotatedSignal;
use crate::wire::{sample_offset_us, DeviceId, FrameFlags, TelemetryFrame, MAX_CODE, VERSION};

pub const ADC_MAX: u16 = MAX_CODE;
pub const DEFAULT_VREF: f64 = 3.3;
/// Millivolts at the electrodes per volt at the ADC input.
pub const DEFAULT_GAIN_MV_PER_V: f64 = 1.1;
pub const MAX_BATCH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("signal is sampled at {signal} Hz but the device runs at {device} Hz")]
    FsMismatch { signal: f64, device: f64 },
    #[error("scenario has no samples")]
    EmptyScenario,
    #[error("scenario covers {have} samples but {needed} are needed")]
    ScenarioTooShort { needed: usize, have: usize },
    #[error("invalid device config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub device_id: DeviceId,
    pub fs: u16,
    pub vref: f64,
    pub batch_size: usize,
    pub temp_poll_interval_s: f64,
    pub frontend_gain_mv_per_v: f64,
    pub frontend_offset_v: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            device_id: DeviceId::default(),
            fs: 250,
            vref: DEFAULT_VREF,
            batch_size: 250,
            temp_poll_interval_s: 1.0,
            frontend_gain_mv_per_v: DEFAULT_GAIN_MV_PER_V,
            frontend_offset_v: DEFAULT_VREF / 2.0,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.vref > 0.0 && self.vref.is_finite()) {
            return Err(DeviceError::BadConfig("vref must be positive".into()));
        }
        if !(1..=MAX_BATCH).contains(&self.batch_size) {
            return Err(DeviceError::BadConfig(format!(
                "batch_size {} outside 1..={MAX_BATCH}",
                self.batch_size
            )));
        }
        if self.fs < 100 {
            return Err(DeviceError::BadConfig(format!("fs {} below 100 Hz", self.fs)));
        }
        if !(self.temp_poll_interval_s >= 1.0) {
            return Err(DeviceError::BadConfig(
                "temp_poll_interval must be at least 1 s".into(),
            ));
        }
        if !(self.frontend_gain_mv_per_v > 0.0) {
            return Err(DeviceError::BadConfig("frontend gain must be positive".into()));
        }
        Ok(())
    }

    pub fn frontend(&self) -> Frontend {
        Frontend {
            vref: self.vref,
            gain_mv_per_v: self.frontend_gain_mv_per_v,
            offset_v: self.frontend_offset_v,
        }
    }
}

/// Analog front-end mapping between electrode millivolts and ADC codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub vref: f64,
    pub gain_mv_per_v: f64,
    pub offset_v: f64,
}

impl Default for Frontend {
    fn default() -> Self {
        DeviceConfig::default().frontend()
    }
}

impl Frontend {
    pub fn mv_to_volts(&self, mv: f64) -> f64 {
        self.offset_v + mv / self.gain_mv_per_v
    }

    pub fn code_to_mv(&self, code: u16) -> f64 {
        (dequantize(AdcReading(code), self.vref) - self.offset_v) * self.gain_mv_per_v
    }

    /// Worst-case reconstruction error in millivolts for in-range input.
    pub fn half_lsb_mv(&self) -> f64 {
        half_lsb(self.vref) * self.gain_mv_per_v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdcReading(pub u16);

/// Converts a voltage to a 10-bit code, rounding half up and clamping to the rails.
pub fn quantize(voltage: f64, vref: f64) -> AdcReading {
    let scaled = (voltage / vref * f64::from(ADC_MAX) + 0.5).floor();
    AdcReading(scaled.clamp(0.0, f64::from(ADC_MAX)) as u16)
}

pub fn dequantize(reading: AdcReading, vref: f64) -> f64 {
    f64::from(reading.0) * vref / f64::from(ADC_MAX)
}

/// Half of one quantization step, `vref / (2 * 1023)`.
pub fn half_lsb(vref: f64) -> f64 {
    vref / (2.0 * f64::from(ADC_MAX))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LeadState {
    pub lo_plus: bool,
    pub lo_minus: bool,
}

impl LeadState {
    pub const CONNECTED: LeadState = LeadState {
        lo_plus: false,
        lo_minus: false,
    };

    pub fn is_off(&self) -> bool {
        self.lo_plus || self.lo_minus
    }

    fn merge(self, other: LeadState) -> LeadState {
        LeadState {
            lo_plus: self.lo_plus || other.lo_plus,
            lo_minus: self.lo_minus || other.lo_minus,
        }
    }
}

/// Digitizes a millivolt signal. Lead-off saturates every code to full scale.
pub fn sample_ecg(
    signal: &AnnotatedSignal,
    lead: LeadState,
    cfg: &DeviceConfig,
) -> Result<Vec<AdcReading>, DeviceError> {
    if signal.fs != f64::from(cfg.fs) {
        return Err(DeviceError::FsMismatch {
            signal: signal.fs,
            device: f64::from(cfg.fs),
        });
    }
    if lead.is_off() {
        return Ok(vec![AdcReading(ADC_MAX); signal.samples.len()]);
    }
    let fe = cfg.frontend();
    Ok(signal
        .samples
        .iter()
        .map(|&mv| quantize(fe.mv_to_volts(mv), cfg.vref))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSuite {
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub alcohol_level: f64,
}

impl Default for SensorSuite {
    fn default() -> Self {
        Self {
            temperature_c: 36.6,
            humidity_pct: 45.0,
            alcohol_level: 0.0,
        }
    }
}

impl SensorSuite {
    /// Applies DHT11 resolution and every channel's range limits.
    pub fn as_reported(&self) -> SensorSuite {
        SensorSuite {
            temperature_c: round_half_up(self.temperature_c).clamp(0.0, 50.0),
            humidity_pct: round_half_up(self.humidity_pct).clamp(20.0, 90.0),
            alcohol_level: self.alcohol_level.clamp(0.0, 1.0),
        }
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Piecewise-linear channel defined by `(t, value)` breakpoints.
///
/// Values hold flat before the first and after the last breakpoint. Two
/// breakpoints at the same time form a step; the later one wins from that
/// instant on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Track {
    points: Vec<(f64, f64)>,
}

impl Track {
    pub fn constant(v: f64) -> Self {
        Self {
            points: vec![(0.0, v)],
        }
    }

    /// Breakpoints must be time-ordered.
    pub fn new(points: Vec<(f64, f64)>) -> Option<Self> {
        if points.windows(2).any(|w| w[0].0 > w[1].0) {
            return None;
        }
        Some(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        let first = self.points.first()?;
        if t < first.0 {
            return Some(first.1);
        }
        // Last breakpoint at or before t.
        let idx = self.points.partition_point(|p| p.0 <= t) - 1;
        let (t0, v0) = self.points[idx];
        match self.points.get(idx + 1) {
            Some(&(t1, v1)) if t1 > t0 => Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0)),
            _ => Some(v0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorTrajectory {
    pub temperature_c: Track,
    pub humidity_pct: Track,
    pub alcohol_level: Track,
}

impl SensorTrajectory {
    pub fn constant(s: SensorSuite) -> Self {
        Self {
            temperature_c: Track::constant(s.temperature_c),
            humidity_pct: Track::constant(s.humidity_pct),
            alcohol_level: Track::constant(s.alcohol_level),
        }
    }

    pub fn at(&self, t: f64) -> SensorSuite {
        let d = SensorSuite::default();
        SensorSuite {
            temperature_c: self.temperature_c.at(t).unwrap_or(d.temperature_c),
            humidity_pct: self.humidity_pct.at(t).unwrap_or(d.humidity_pct),
            alcohol_level: self.alcohol_level.at(t).unwrap_or(d.alcohol_level),
        }
    }
}

/// Most recent poll instant not after `t`.
pub fn poll_instant(t: f64, interval_s: f64) -> f64 {
    (t / interval_s).floor() * interval_s
}

/// What the sensors report at `t`: the world sampled at the latest poll.
pub fn poll_sensors(t: f64, world: &SensorTrajectory, cfg: &DeviceConfig) -> SensorSuite {
    world
        .at(poll_instant(t.max(0.0), cfg.temp_poll_interval_s))
        .as_reported()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadOffWindow {
    pub from_s: f64,
    pub to_s: f64,
    pub lead: LeadState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub signal: AnnotatedSignal,
    pub sensors: SensorTrajectory,
    pub lead_off: Vec<LeadOffWindow>,
    /// Wall-clock time of the first sample.
    pub start_time_us: u64,
}

impl Scenario {
    /// Lead state over `[from_s, to_s)`: any overlapping window counts.
    fn lead_over(&self, from_s: f64, to_s: f64) -> LeadState {
        self.lead_off
            .iter()
            .filter(|w| w.from_s < to_s && w.to_s > from_s)
            .fold(LeadState::CONNECTED, |acc, w| acc.merge(w.lead))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalEventKind {
    BuzzerOn,
    BuzzerOff,
    DisplayUpdate { lines: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: LocalEventKind,
}

/// On-device alarm check, sharing thresholds with the default alert rules.
fn precheck_trips(s: &SensorSuite, buzzer_on: bool) -> bool {
    let temp = alert_defaults::TEMPERATURE_C;
    let alcohol = alert_defaults::ALCOHOL_LEVEL;
    if buzzer_on {
        s.temperature_c >= temp.threshold - temp.hysteresis
            || s.alcohol_level >= alcohol.threshold - alcohol.hysteresis
    } else {
        s.temperature_c >= temp.threshold || s.alcohol_level >= alcohol.threshold
    }
}

fn display_lines(s: &SensorSuite, status: &str) -> Vec<String> {
    vec![
        "BPM --".to_string(),
        format!("TEMP {:.0}C", s.temperature_c),
        format!("STATUS {status}"),
    ]
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceRun {
    pub frames: Vec<TelemetryFrame>,
    pub events: Vec<LocalEvent>,
}

/// Runs the node over `duration_s` seconds of `scenario`.
pub fn run_device(
    cfg: &DeviceConfig,
    scenario: &Scenario,
    duration_s: f64,
) -> Result<DeviceRun, DeviceError> {
    cfg.validate()?;
    if scenario.signal.samples.is_empty() {
        return Err(DeviceError::EmptyScenario);
    }
    let fs = f64::from(cfg.fs);
    let total = (duration_s.max(0.0) * fs).round() as usize;
    let codes = sample_ecg(&scenario.signal, LeadState::CONNECTED, cfg)?;
    if codes.len() < total {
        return Err(DeviceError::ScenarioTooShort {
            needed: total,
            have: codes.len(),
        });
    }

    // Walk the sensor poll schedule once; it drives buzzer and display.
    let interval = cfg.temp_poll_interval_s;
    let mut events = Vec::new();
    let mut polls: Vec<(f64, SensorSuite, bool)> = Vec::new();
    let mut buzzer = false;
    let mut last_lines: Option<Vec<String>> = None;
    let mut k = 0u64;
    loop {
        let t = k as f64 * interval;
        if t > duration_s {
            break;
        }
        let reading = poll_sensors(t, &scenario.sensors, cfg);
        let trips = precheck_trips(&reading, buzzer);
        if trips != buzzer {
            buzzer = trips;
            events.push(LocalEvent {
                t,
                kind: if buzzer {
                    LocalEventKind::BuzzerOn
                } else {
                    LocalEventKind::BuzzerOff
                },
            });
        }
        let lead = scenario.lead_over(t, t + interval);
        let status = if lead.is_off() {
            "LEAD OFF"
        } else if buzzer {
            "ALERT"
        } else {
            "OK"
        };
        let lines = display_lines(&reading, status);
        if last_lines.as_ref() != Some(&lines) {
            events.push(LocalEvent {
                t,
                kind: LocalEventKind::DisplayUpdate {
                    lines: lines.clone(),
                },
            });
            last_lines = Some(lines);
        }
        polls.push((t, reading, buzzer));
        k += 1;
    }

    let poll_at = |t: f64| -> &(f64, SensorSuite, bool) {
        let idx = polls.partition_point(|p| p.0 <= t).max(1) - 1;
        &polls[idx]
    };

    let mut frames = Vec::with_capacity(total.div_ceil(cfg.batch_size));
    for (seq, start) in (0..total).step_by(cfg.batch_size).enumerate() {
        let end = (start + cfg.batch_size).min(total);
        let t0 = start as f64 / fs;
        let t1 = end as f64 / fs;
        let lead = scenario.lead_over(t0, t1);
        let (_, reading, _) = poll_at(t0);
        let buzzing = poll_at(t0).2 || polls.iter().any(|p| p.0 >= t0 && p.0 < t1 && p.2);
        let samples = if lead.is_off() {
            vec![ADC_MAX; end - start]
        } else {
            codes[start..end].iter().map(|c| c.0).collect()
        };
        let flags = FrameFlags::default()
            .with(FrameFlags::LEAD_OFF_PLUS, lead.lo_plus)
            .with(FrameFlags::LEAD_OFF_MINUS, lead.lo_minus)
            .with(FrameFlags::BUZZER, buzzing);
        frames.push(TelemetryFrame {
            version: VERSION,
            device_id: cfg.device_id,
            seq: seq as u32,
            t_start_us: scenario.start_time_us + sample_offset_us(start as u64, cfg.fs),
            fs: cfg.fs,
            flags,
            temp_centi_c: (reading.temperature_c * 100.0).round() as i16,
            alcohol_permille: (reading.alcohol_level * 1000.0).round() as u16,
            samples,
        });
    }
    Ok(DeviceRun { frames, events })
}
