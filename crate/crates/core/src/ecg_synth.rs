//! Synthetic ECG generator.
//!
//! Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) placed at fixed
//! offsets from the beat onset. Beat onsets follow a [`RhythmPlan`], and the
//! generator records the exact R-peak times it used so downstream detectors
//! can be scored against ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest sampling rate the generator accepts.
pub const MIN_FS: f64 = 100.0;
/// Sampling rate used when none is configured.
pub const DEFAULT_FS: f64 = 250.0;
/// Onset of the first beat, seconds.
pub const FIRST_ONSET_S: f64 = 0.1;

const MIN_RR_S: f64 = 0.3;
const MAX_RR_S: f64 = 3.0;
/// Gaussian tails beyond this many widths are not rendered.
const TAIL_WIDTHS: f64 = 8.0;
const NOISE_STREAM: u64 = 0x6e6f_6973_655f_7631;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("sampling rate {0} Hz is below the {MIN_FS} Hz minimum")]
    SampleRateTooLow(f64),
    #[error("duration must be finite and non-negative, got {0}")]
    BadDuration(f64),
    #[error("invalid rhythm plan: {0}")]
    BadPlan(String),
    #[error("invalid morphology: {0}")]
    BadMorphology(String),
    #[error("unknown rhythm label {0:?}")]
    UnknownRhythm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveLabel {
    P,
    Q,
    R,
    S,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub label: WaveLabel,
    pub amplitude_mv: f64,
    /// Offset from beat onset, seconds.
    pub center_s: f64,
    /// Gaussian standard deviation, seconds.
    pub width_s: f64,
}

impl WaveParams {
    pub const fn new(label: WaveLabel, amplitude_mv: f64, center_s: f64, width_s: f64) -> Self {
        Self {
            label,
            amplitude_mv,
            center_s,
            width_s,
        }
    }

    fn value_at(&self, phase_s: f64) -> f64 {
        let z = (phase_s - self.center_s) / self.width_s;
        self.amplitude_mv * (-0.5 * z * z).exp()
    }
}

/// The P-QRS-T wave set of one beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Morphology {
    waves: Vec<WaveParams>,
}

impl Default for Morphology {
    fn default() -> Self {
        use WaveLabel::*;
        Self {
            waves: vec![
                WaveParams::new(P, 0.15, 0.10, 0.025),
                WaveParams::new(Q, -0.15, 0.22, 0.010),
                WaveParams::new(R, 1.20, 0.25, 0.012),
                WaveParams::new(S, -0.25, 0.28, 0.010),
                WaveParams::new(T, 0.30, 0.45, 0.040),
            ],
        }
    }
}

impl Morphology {
    /// Builds a morphology from exactly one wave per label, ordered P..T.
    pub fn new(waves: Vec<WaveParams>) -> Result<Self, SynthError> {
        use WaveLabel::*;
        let expected = [P, Q, R, S, T];
        if waves.len() != expected.len() {
            return Err(SynthError::BadMorphology(format!(
                "expected 5 waves, got {}",
                waves.len()
            )));
        }
        for (w, label) in waves.iter().zip(expected) {
            if w.label != label {
                return Err(SynthError::BadMorphology(format!(
                    "expected wave {label:?}, found {:?}",
                    w.label
                )));
            }
            if !(w.width_s > 0.0 && w.width_s.is_finite()) {
                return Err(SynthError::BadMorphology(format!(
                    "wave {label:?} width must be positive"
                )));
            }
            if !w.amplitude_mv.is_finite() || !w.center_s.is_finite() {
                return Err(SynthError::BadMorphology(format!(
                    "wave {label:?} has non-finite parameters"
                )));
            }
        }
        if waves.windows(2).any(|p| p[0].center_s >= p[1].center_s) {
            return Err(SynthError::BadMorphology(
                "wave centers must increase P < Q < R < S < T".into(),
            ));
        }
        Ok(Self { waves })
    }

    pub fn waves(&self) -> &[WaveParams] {
        &self.waves
    }

    pub fn wave(&self, label: WaveLabel) -> &WaveParams {
        self.waves
            .iter()
            .find(|w| w.label == label)
            .expect("morphology holds every label")
    }

    /// R-wave offset from beat onset.
    pub fn r_offset_s(&self) -> f64 {
        self.wave(WaveLabel::R).center_s
    }

    pub fn pr_interval_s(&self) -> f64 {
        self.wave(WaveLabel::R).center_s - self.wave(WaveLabel::P).center_s
    }

    pub fn qt_interval_s(&self) -> f64 {
        let t = self.wave(WaveLabel::T);
        t.center_s + 2.0 * t.width_s - self.wave(WaveLabel::Q).center_s
    }

    /// Phase range outside which every wave is below its tail cutoff.
    fn support(&self) -> (f64, f64) {
        let lo = self
            .waves
            .iter()
            .map(|w| w.center_s - TAIL_WIDTHS * w.width_s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .waves
            .iter()
            .map(|w| w.center_s + TAIL_WIDTHS * w.width_s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Evaluates one beat's voltage at `phase_s` seconds after onset.
pub fn synth_beat(phase_s: f64, waves: &[WaveParams]) -> f64 {
    waves.iter().map(|w| w.value_at(phase_s)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhythmMode {
    Normal,
    Tachycardia,
    Bradycardia,
    Irregular,
}

impl RhythmMode {
    pub const ALL: [RhythmMode; 4] = [
        RhythmMode::Normal,
        RhythmMode::Tachycardia,
        RhythmMode::Bradycardia,
        RhythmMode::Irregular,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RhythmMode::Normal => "normal",
            RhythmMode::Tachycardia => "tachycardia",
            RhythmMode::Bradycardia => "bradycardia",
            RhythmMode::Irregular => "irregular",
        }
    }
}

impl fmt::Display for RhythmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RhythmMode {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(RhythmMode::Normal),
            "tachycardia" => Ok(RhythmMode::Tachycardia),
            "bradycardia" => Ok(RhythmMode::Bradycardia),
            "irregular" => Ok(RhythmMode::Irregular),
            _ => Err(SynthError::UnknownRhythm(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmPlan {
    pub base_bpm: f64,
    /// Fractional standard deviation of RR intervals.
    pub rr_jitter: f64,
    pub mode: RhythmMode,
    pub seed: u64,
}

impl Default for RhythmPlan {
    fn default() -> Self {
        Self {
            base_bpm: 72.0,
            rr_jitter: 0.0,
            mode: RhythmMode::Normal,
            seed: 0,
        }
    }
}

impl RhythmPlan {
    pub fn new(base_bpm: f64, rr_jitter: f64, mode: RhythmMode, seed: u64) -> Self {
        Self {
            base_bpm,
            rr_jitter,
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(20.0..=250.0).contains(&self.base_bpm) {
            return Err(SynthError::BadPlan(format!(
                "base_bpm {} outside 20..=250",
                self.base_bpm
            )));
        }
        if !(self.rr_jitter >= 0.0 && self.rr_jitter.is_finite()) {
            return Err(SynthError::BadPlan(format!(
                "rr_jitter {} must be >= 0",
                self.rr_jitter
            )));
        }
        Ok(())
    }

    pub fn nominal_rr_s(&self) -> f64 {
        60.0 / self.base_bpm
    }

    fn draw_rr(&self, rng: &mut ChaCha8Rng) -> f64 {
        let nominal = self.nominal_rr_s();
        if self.rr_jitter == 0.0 {
            return nominal;
        }
        let rr = match self.mode {
            RhythmMode::Irregular => {
                // Log-normal with mean equal to the nominal interval.
                let sigma = self.rr_jitter;
                let mu = nominal.ln() - 0.5 * sigma * sigma;
                LogNormal::new(mu, sigma)
                    .expect("sigma is finite and positive")
                    .sample(rng)
            }
            _ => {
                let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
                nominal * (1.0 + self.rr_jitter * z)
            }
        };
        rr.clamp(MIN_RR_S, MAX_RR_S)
    }
}

/// Default magnitudes applied by [`inject_anomaly`].
pub const TACHYCARDIA_BPM: f64 = 130.0;
pub const BRADYCARDIA_BPM: f64 = 45.0;
pub const IRREGULAR_JITTER: f64 = 0.25;
const REGULAR_JITTER_CAP: f64 = 0.05;

/// Returns a plan whose rhythm satisfies `kind`'s defining predicate.
pub fn inject_anomaly(plan: &RhythmPlan, kind: RhythmMode) -> RhythmPlan {
    let mut out = *plan;
    out.mode = kind;
    match kind {
        RhythmMode::Normal => {
            if !(60.0..=100.0).contains(&out.base_bpm) {
                out.base_bpm = 72.0;
            }
            out.rr_jitter = out.rr_jitter.min(REGULAR_JITTER_CAP);
        }
        RhythmMode::Tachycardia => {
            out.base_bpm = TACHYCARDIA_BPM;
            out.rr_jitter = out.rr_jitter.min(REGULAR_JITTER_CAP);
        }
        RhythmMode::Bradycardia => {
            out.base_bpm = BRADYCARDIA_BPM;
            out.rr_jitter = out.rr_jitter.min(REGULAR_JITTER_CAP);
        }
        RhythmMode::Irregular => {
            out.rr_jitter = out.rr_jitter.max(IRREGULAR_JITTER);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub baseline_wander_mv: f64,
    pub baseline_wander_hz: f64,
    pub powerline_mv: f64,
    pub powerline_hz: f64,
    pub white_noise_mv: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn white(sd_mv: f64) -> Self {
        Self {
            white_noise_mv: sd_mv,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let amps = [
            self.baseline_wander_mv,
            self.powerline_mv,
            self.white_noise_mv,
        ];
        if amps.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(SynthError::BadPlan(
                "noise amplitudes must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    fn is_silent(&self) -> bool {
        self.baseline_wander_mv == 0.0 && self.powerline_mv == 0.0 && self.white_noise_mv == 0.0
    }
}

/// Ground truth for one generated beat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatTruth {
    pub r_time_s: f64,
    pub onset_s: f64,
    pub pr_s: f64,
    pub qt_s: f64,
    pub label: RhythmMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSignal {
    pub fs: f64,
    /// Millivolts, sample `i` at `i / fs` seconds.
    pub samples: Vec<f64>,
    pub truth: Vec<BeatTruth>,
}

impl AnnotatedSignal {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn rr_intervals(&self) -> Vec<f64> {
        self.truth
            .windows(2)
            .map(|w| w[1].r_time_s - w[0].r_time_s)
            .collect()
    }
}

/// A rhythm plan that takes effect for beats starting at or after `from_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledPlan {
    pub from_s: f64,
    pub plan: RhythmPlan,
}

/// Generates `duration_s` seconds of ECG at `fs` following a single plan.
pub fn generate(
    duration_s: f64,
    fs: f64,
    plan: &RhythmPlan,
    morphology: &Morphology,
    noise: &NoiseSpec,
) -> Result<AnnotatedSignal, SynthError> {
    generate_scheduled(
        duration_s,
        fs,
        &[ScheduledPlan {
            from_s: 0.0,
            plan: *plan,
        }],
        morphology,
        noise,
    )
}

/// Like [`generate`], but switches rhythm plans at the scheduled times.
///
/// The RR interval following each beat is drawn from the plan active at that
/// beat's onset. Randomness is seeded from the first plan.
pub fn generate_scheduled(
    duration_s: f64,
    fs: f64,
    schedule: &[ScheduledPlan],
    morphology: &Morphology,
    noise: &NoiseSpec,
) -> Result<AnnotatedSignal, SynthError> {
    if !(fs >= MIN_FS) || !fs.is_finite() {
        return Err(SynthError::SampleRateTooLow(fs));
    }
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(SynthError::BadDuration(duration_s));
    }
    let first = schedule
        .first()
        .ok_or_else(|| SynthError::BadPlan("empty rhythm schedule".into()))?;
    for entry in schedule {
        entry.plan.validate()?;
    }
    if schedule.windows(2).any(|w| w[0].from_s > w[1].from_s) {
        return Err(SynthError::BadPlan("schedule must be time-ordered".into()));
    }
    noise.validate()?;

    let n = (duration_s * fs).round() as usize;
    let mut samples = vec![0.0; n];
    let mut truth = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(first.plan.seed);

    let (support_lo, support_hi) = morphology.support();
    let r_offset = morphology.r_offset_s();
    let pr = morphology.pr_interval_s();
    let qt = morphology.qt_interval_s();

    let plan_at = |t: f64| -> &RhythmPlan {
        &schedule
            .iter()
            .rev()
            .find(|e| e.from_s <= t)
            .unwrap_or(first)
            .plan
    };

    let mut onset = FIRST_ONSET_S;
    while onset + support_lo <= duration_s {
        let plan = plan_at(onset);
        let r_time = onset + r_offset;
        if (0.0..=duration_s).contains(&r_time) {
            truth.push(BeatTruth {
                r_time_s: r_time,
                onset_s: onset,
                pr_s: pr,
                qt_s: qt,
                label: plan.mode,
            });
        }
        let lo = (((onset + support_lo) * fs).ceil().max(0.0)) as usize;
        let hi = (((onset + support_hi) * fs).floor() as usize).min(n.saturating_sub(1));
        for (i, s) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *s += synth_beat(i as f64 / fs - onset, morphology.waves());
        }
        onset += plan.draw_rr(&mut rng);
    }

    if !noise.is_silent() {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(first.plan.seed ^ NOISE_STREAM);
        let white = Normal::new(0.0, noise.white_noise_mv.max(f64::MIN_POSITIVE))
            .expect("finite standard deviation");
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *s += noise.baseline_wander_mv * (2.0 * PI * noise.baseline_wander_hz * t).sin();
            *s += noise.powerline_mv * (2.0 * PI * noise.powerline_hz * t).sin();
            if noise.white_noise_mv > 0.0 {
                *s += white.sample(&mut noise_rng);
            }
        }
    }

    Ok(AnnotatedSignal { fs, samples, truth })
}

/// Mean square of a signal; used to set white noise for a target SNR.
pub fn signal_power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64
}

/// White-noise standard deviation giving `snr_db` against `samples`.
pub fn white_noise_for_snr(samples: &[f64], snr_db: f64) -> f64 {
    (signal_power(samples) / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Draws a uniformly distributed value in `range` from a seeded stream.
pub fn seeded_uniform(seed: u64, lo: f64, hi: f64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(lo..hi)
}
