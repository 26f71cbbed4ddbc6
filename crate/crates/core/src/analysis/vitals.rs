//! Heart rate, RR statistics and rhythm classification.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::qrs::PeakAnnotation;
use crate::wire::DeviceId;

/// Intervals used for the trailing heart-rate average.
pub const HR_INTERVALS: usize = 8;
pub const TACHYCARDIA_ABOVE_BPM: f64 = 100.0;
pub const BRADYCARDIA_BELOW_BPM: f64 = 60.0;
/// RMSSD relative to mean RR at or above which a rhythm counts as irregular.
pub const IRREGULARITY_RATIO: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rhythm {
    NormalSinus,
    Tachycardia,
    Bradycardia,
    Irregular,
    Indeterminate,
}

impl Rhythm {
    pub const ALL: [Rhythm; 5] = [
        Rhythm::NormalSinus,
        Rhythm::Tachycardia,
        Rhythm::Bradycardia,
        Rhythm::Irregular,
        Rhythm::Indeterminate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rhythm::NormalSinus => "normal_sinus",
            Rhythm::Tachycardia => "tachycardia",
            Rhythm::Bradycardia => "bradycardia",
            Rhythm::Irregular => "irregular",
            Rhythm::Indeterminate => "indeterminate",
        }
    }
}

impl fmt::Display for Rhythm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rhythm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rhythm::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown rhythm {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RrStats {
    pub count: usize,
    pub mean: f64,
    pub sdnn: f64,
    pub rmssd: f64,
}

/// Mean, sample standard deviation and RMSSD of RR intervals in seconds.
pub fn rr_stats(rr: &[f64]) -> RrStats {
    let count = rr.len();
    if count == 0 {
        return RrStats::default();
    }
    let mean = rr.iter().sum::<f64>() / count as f64;
    let sdnn = if count > 1 {
        (rr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    let rmssd = if count > 1 {
        let sq: f64 = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        (sq / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    RrStats {
        count,
        mean,
        sdnn,
        rmssd,
    }
}

/// Successive differences of peak times.
pub fn rr_intervals(peaks: &[PeakAnnotation]) -> Vec<f64> {
    peaks.windows(2).map(|w| w[1].t - w[0].t).collect()
}

/// The trailing `HR_INTERVALS` intervals, or all of them if fewer.
pub fn trailing(rr: &[f64]) -> &[f64] {
    &rr[rr.len().saturating_sub(HR_INTERVALS)..]
}

/// Beats per minute over the trailing intervals; `None` with fewer than 2 peaks.
pub fn heart_rate(peaks: &[PeakAnnotation]) -> Option<f64> {
    let rr = rr_intervals(peaks);
    let recent = trailing(&rr);
    if recent.is_empty() {
        return None;
    }
    Some(60.0 / rr_stats(recent).mean)
}

pub fn classify(bpm: Option<f64>, rr: &RrStats, lead_ok: bool) -> Rhythm {
    let Some(bpm) = bpm else {
        return Rhythm::Indeterminate;
    };
    if !lead_ok || rr.count < 2 {
        Rhythm::Indeterminate
    } else if rr.rmssd / rr.mean >= IRREGULARITY_RATIO {
        Rhythm::Irregular
    } else if bpm > TACHYCARDIA_ABOVE_BPM {
        Rhythm::Tachycardia
    } else if bpm < BRADYCARDIA_BELOW_BPM {
        Rhythm::Bradycardia
    } else {
        Rhythm::NormalSinus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsSnapshot {
    pub device_id: DeviceId,
    /// Window end, seconds since the epoch.
    pub t: f64,
    pub bpm: Option<f64>,
    pub rr_mean: Option<f64>,
    pub rr_sdnn: Option<f64>,
    pub rr_rmssd: Option<f64>,
    pub rhythm: Rhythm,
    /// Last reported sensor values, if any frame carried them.
    pub temperature_c: Option<f64>,
    pub alcohol_level: Option<f64>,
    pub lead_ok: bool,
}

impl VitalsSnapshot {
    /// Builds a snapshot from the RR intervals that end inside the window.
    pub fn from_rr(
        device_id: DeviceId,
        t: f64,
        rr: &[f64],
        temperature_c: Option<f64>,
        alcohol_level: Option<f64>,
        lead_ok: bool,
    ) -> Self {
        let stats = rr_stats(trailing(rr));
        let enough = stats.count >= 2;
        let bpm = enough.then(|| 60.0 / stats.mean);
        VitalsSnapshot {
            device_id,
            t,
            bpm,
            rr_mean: enough.then_some(stats.mean),
            rr_sdnn: enough.then_some(stats.sdnn),
            rr_rmssd: enough.then_some(stats.rmssd),
            rhythm: classify(bpm, &stats, lead_ok),
            temperature_c,
            alcohol_level,
            lead_ok,
        }
    }
}
