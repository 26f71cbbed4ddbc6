//! Streaming R-peak detector.
//!
//! Stages: band-pass, five-point derivative, squaring, 150 ms moving-window
//! integration, then adaptive thresholding over the integrated signal's
//! lobes. Each accepted lobe is mapped back to the R apex in the unfiltered
//! input by subtracting the pipeline delay and searching ±50 ms for the
//! maximum.
//!
//! Every decision is a function of sample indices and ratios between
//! signal-derived estimates, so results are invariant to how the input is
//! chunked and to uniform scaling of the input.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::filter::{Bandpass, DELAY_REFERENCE_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub integration_s: f64,
    pub refractory_s: f64,
    /// Half-width of the apex search in the raw signal.
    pub apex_search_s: f64,
    /// Weight of a new peak in the running signal/noise estimates.
    pub alpha: f64,
    /// Position of the threshold between running noise (0) and signal (1).
    pub threshold_ratio: f64,
    /// Candidates this soon after a beat, and under half its energy, are T waves.
    pub t_wave_window_s: f64,
    /// Search back once the current RR exceeds this multiple of the average.
    pub searchback_factor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            integration_s: 0.150,
            refractory_s: 0.200,
            apex_search_s: 0.050,
            alpha: 0.125,
            threshold_ratio: 0.25,
            t_wave_window_s: 0.360,
            searchback_factor: 1.66,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakAnnotation {
    /// Seconds since the detector's time origin.
    pub t: f64,
    /// Sample index of the apex relative to the origin.
    pub index: u64,
    /// Input value at the apex, millivolts.
    pub amplitude: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy)]
struct Lobe {
    /// Index of the integrator maximum.
    at: u64,
    energy: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    energy: f64,
    apex: u64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct QrsDetector {
    fs: f64,
    cfg: DetectorConfig,
    origin_s: f64,
    bandpass: Bandpass,

    next_index: u64,
    filtered: [f64; 4],
    squares: VecDeque<f64>,
    window: usize,
    integ_prev: [f64; 2],

    raw: VecDeque<f64>,
    raw_base: u64,
    raw_capacity: usize,

    delay: u64,
    apex_half: u64,
    refractory: u64,
    t_wave_window: u64,

    pending: Option<Lobe>,
    signal_level: f64,
    noise_level: f64,
    initialized: bool,
    last_beat: Option<(u64, f64)>,
    rr: VecDeque<u64>,
    since_beat: Vec<Candidate>,
}

const RR_MEMORY: usize = 8;

impl QrsDetector {
    pub fn new(fs: f64) -> Self {
        Self::with_config(fs, 0.0, DetectorConfig::default())
    }

    /// `origin_s` is the time of the first sample pushed.
    pub fn with_config(fs: f64, origin_s: f64, cfg: DetectorConfig) -> Self {
        let bandpass = Bandpass::new(fs);
        let window = ((cfg.integration_s * fs).round() as usize).max(1);
        let bp_delay = bandpass.group_delay_samples(DELAY_REFERENCE_HZ);
        // Band-pass + derivative centre (2) + integrator centre.
        let delay = (bp_delay + 2.0 + (window - 1) as f64 / 2.0).round() as u64;
        let apex_half = (cfg.apex_search_s * fs).round() as u64;
        let refractory = (cfg.refractory_s * fs).round() as u64;
        let raw_capacity = (delay + apex_half + refractory) as usize + 2 * fs as usize;
        Self {
            fs,
            cfg,
            origin_s,
            bandpass,
            next_index: 0,
            filtered: [0.0; 4],
            squares: VecDeque::from(vec![0.0; window]),
            window,
            integ_prev: [0.0; 2],
            raw: VecDeque::with_capacity(raw_capacity + 1),
            raw_base: 0,
            raw_capacity,
            delay,
            apex_half,
            refractory,
            t_wave_window: (cfg.t_wave_window_s * fs).round() as u64,
            pending: None,
            signal_level: 0.0,
            noise_level: 0.0,
            initialized: false,
            last_beat: None,
            rr: VecDeque::with_capacity(RR_MEMORY),
            since_beat: Vec::new(),
        }
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Samples between an R apex and the integrator maximum it produces.
    pub fn delay_samples(&self) -> u64 {
        self.delay
    }

    /// Number of samples consumed so far.
    pub fn samples_seen(&self) -> u64 {
        self.next_index
    }

    pub fn push_slice(&mut self, xs: &[f64], out: &mut Vec<PeakAnnotation>) {
        for &x in xs {
            self.push(x, out);
        }
    }

    /// Feeds one millivolt sample; detected beats are appended to `out`.
    pub fn push(&mut self, x: f64, out: &mut Vec<PeakAnnotation>) {
        let n = self.next_index;
        self.next_index += 1;

        self.raw.push_back(x);
        if self.raw.len() > self.raw_capacity {
            self.raw.pop_front();
            self.raw_base += 1;
        }

        let y = self.bandpass.process(x);
        let [y1, y2, y3, y4] = self.filtered;
        let d = (2.0 * y + y1 - y3 - 2.0 * y4) * self.fs / 8.0;
        self.filtered = [y, y1, y2, y3];

        self.squares.pop_front();
        self.squares.push_back(d * d);
        let m = self.squares.iter().sum::<f64>() / self.window as f64;

        // A local maximum of the integrator sits at n - 1.
        let [m1, m2] = self.integ_prev;
        if n >= 2 && m1 > m2 && m1 >= m && m1 > 0.0 {
            self.offer(Lobe { at: n - 1, energy: m1 });
        }
        self.integ_prev = [m, m1];

        if let Some(lobe) = self.pending {
            if n - lobe.at > self.refractory {
                self.pending = None;
                self.decide(lobe, out);
            }
        }
        self.search_back(n, out);
    }

    /// Merges lobes closer than the refractory period, keeping the larger.
    fn offer(&mut self, lobe: Lobe) {
        match self.pending {
            Some(p) if lobe.at - p.at <= self.refractory => {
                if lobe.energy > p.energy {
                    self.pending = Some(lobe);
                }
            }
            _ => self.pending = Some(lobe),
        }
    }

    fn locate_apex(&self, lobe: &Lobe) -> (u64, f64) {
        let centre = lobe.at.saturating_sub(self.delay);
        let lo = centre.saturating_sub(self.apex_half).max(self.raw_base);
        let hi = (centre + self.apex_half).min(self.next_index - 1);
        let mut best = (lo, f64::NEG_INFINITY);
        for i in lo..=hi {
            let v = self.raw[(i - self.raw_base) as usize];
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    fn threshold(&self) -> f64 {
        self.noise_level + self.cfg.threshold_ratio * (self.signal_level - self.noise_level)
    }

    fn confidence(&self, energy: f64) -> f64 {
        let span = self.signal_level - self.noise_level;
        if span <= 0.0 {
            1.0
        } else {
            ((energy - self.noise_level) / span).clamp(0.0, 1.0)
        }
    }

    fn decide(&mut self, lobe: Lobe, out: &mut Vec<PeakAnnotation>) {
        let (apex, amplitude) = self.locate_apex(&lobe);
        let cand = Candidate {
            energy: lobe.energy,
            apex,
            amplitude,
        };
        if !self.initialized {
            self.initialized = true;
            self.signal_level = cand.energy;
            self.accept(cand, 1.0, out);
            return;
        }
        let (last_apex, last_energy) = self.last_beat.expect("initialized implies a beat");
        if cand.apex < last_apex + self.refractory {
            return;
        }
        let t_wave = cand.apex - last_apex < self.t_wave_window && cand.energy < 0.5 * last_energy;
        if !t_wave && cand.energy > self.threshold() {
            let confidence = self.confidence(cand.energy);
            self.signal_level += self.cfg.alpha * (cand.energy - self.signal_level);
            self.accept(cand, confidence, out);
        } else {
            self.noise_level += self.cfg.alpha * (cand.energy - self.noise_level);
            if !t_wave {
                self.since_beat.push(cand);
            }
        }
    }

    fn accept(&mut self, cand: Candidate, confidence: f64, out: &mut Vec<PeakAnnotation>) {
        if let Some((last, _)) = self.last_beat {
            if self.rr.len() == RR_MEMORY {
                self.rr.pop_front();
            }
            self.rr.push_back(cand.apex - last);
        }
        self.last_beat = Some((cand.apex, cand.energy));
        self.since_beat.clear();
        out.push(PeakAnnotation {
            t: self.origin_s + cand.apex as f64 / self.fs,
            index: cand.apex,
            amplitude: cand.amplitude,
            confidence,
        });
    }

    /// Recovers a missed beat once the current interval runs long.
    fn search_back(&mut self, n: u64, out: &mut Vec<PeakAnnotation>) {
        let Some((last_apex, _)) = self.last_beat else {
            return;
        };
        if self.rr.is_empty() || self.since_beat.is_empty() {
            return;
        }
        let rr_avg = self.rr.iter().sum::<u64>() as f64 / self.rr.len() as f64;
        // Beats are only final once their lobe has been decided, which lags the apex.
        let elapsed = n.saturating_sub(self.delay + self.refractory) as f64 - last_apex as f64;
        if elapsed <= self.cfg.searchback_factor * rr_avg {
            return;
        }
        let floor = 0.5 * self.threshold();
        let best = self
            .since_beat
            .iter()
            .enumerate()
            .filter(|(_, c)| c.energy > floor)
            .max_by(|a, b| a.1.energy.total_cmp(&b.1.energy))
            .map(|(i, c)| (i, *c));
        match best {
            Some((i, cand)) => {
                let min_next = cand.apex + self.refractory;
                let later: Vec<_> = self.since_beat[i + 1..]
                    .iter()
                    .copied()
                    .filter(|c| c.apex >= min_next)
                    .collect();
                let confidence = 0.5 * self.confidence(cand.energy);
                self.signal_level += 0.25 * (cand.energy - self.signal_level);
                self.accept(cand, confidence, out);
                self.since_beat = later;
            }
            None => self.since_beat.clear(),
        }
    }
}

/// Runs a fresh detector over a whole signal.
pub fn detect_peaks(samples: &[f64], fs: f64) -> Vec<PeakAnnotation> {
    let mut det = QrsDetector::new(fs);
    let mut out = Vec::new();
    det.push_slice(samples, &mut out);
    out
}
