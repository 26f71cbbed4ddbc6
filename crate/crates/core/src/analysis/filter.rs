//! QRS-band IIR filtering.
//!
//! A 2nd-order Butterworth high-pass at 5 Hz cascaded with a 4th-order
//! Butterworth low-pass at 15 Hz, each realized as bilinear-transform
//! biquads in transposed direct form II.

use std::f64::consts::PI;

pub const LOW_CUTOFF_HZ: f64 = 5.0;
pub const HIGH_CUTOFF_HZ: f64 = 15.0;
/// Frequency at which the pipeline's group delay is quoted.
pub const DELAY_REFERENCE_HZ: f64 = 10.0;

const BUTTERWORTH_Q2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// Pole-pair Qs of a 4th-order Butterworth.
const BUTTERWORTH_Q4: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z1: f64,
    z2: f64,
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
            z1: 0.0,
            z2: 0.0,
        }
    }

    pub fn lowpass(fs: f64, f0: f64, q: f64) -> Self {
        let w = 2.0 * PI * f0 / fs;
        let (sin, cos) = w.sin_cos();
        let alpha = sin / (2.0 * q);
        let b1 = 1.0 - cos;
        Self::from_raw([b1 / 2.0, b1, b1 / 2.0], 1.0 + alpha, -2.0 * cos, 1.0 - alpha)
    }

    pub fn highpass(fs: f64, f0: f64, q: f64) -> Self {
        let w = 2.0 * PI * f0 / fs;
        let (sin, cos) = w.sin_cos();
        let alpha = sin / (2.0 * q);
        let b1 = -(1.0 + cos);
        Self::from_raw([-b1 / 2.0, b1, -b1 / 2.0], 1.0 + alpha, -2.0 * cos, 1.0 - alpha)
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z1;
        self.z1 = self.b[1] * x - self.a[0] * y + self.z2;
        self.z2 = self.b[2] * x - self.a[1] * y;
        y
    }

    pub fn reset(&mut self) {
        self.z1 = 0.0;
        self.z2 = 0.0;
    }

    /// Complex response at normalized angular frequency `w`.
    fn response(&self, w: f64) -> (f64, f64) {
        let num = poly_at(&self.b, w);
        let den = poly_at(&[1.0, self.a[0], self.a[1]], w);
        cdiv(num, den)
    }

    /// Group delay in samples at normalized angular frequency `w`.
    fn group_delay(&self, w: f64) -> f64 {
        poly_delay(&self.b, w) - poly_delay(&[1.0, self.a[0], self.a[1]], w)
    }
}

fn poly_at(c: &[f64], w: f64) -> (f64, f64) {
    c.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, &ck)| {
        let (s, co) = (k as f64 * w).sin_cos();
        (re + ck * co, im - ck * s)
    })
}

fn cdiv((ar, ai): (f64, f64), (br, bi): (f64, f64)) -> (f64, f64) {
    let d = br * br + bi * bi;
    ((ar * br + ai * bi) / d, (ai * br - ar * bi) / d)
}

/// Group delay of the FIR polynomial `c`: Re(sum k c_k z^-k / sum c_k z^-k).
fn poly_delay(c: &[f64], w: f64) -> f64 {
    let weighted: Vec<f64> = c.iter().enumerate().map(|(k, &ck)| k as f64 * ck).collect();
    cdiv(poly_at(&weighted, w), poly_at(c, w)).0
}

/// Causal 5-15 Hz band-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    fs: f64,
    stages: [Biquad; 3],
}

impl Bandpass {
    pub fn new(fs: f64) -> Self {
        Self {
            fs,
            stages: [
                Biquad::highpass(fs, LOW_CUTOFF_HZ, BUTTERWORTH_Q2),
                Biquad::lowpass(fs, HIGH_CUTOFF_HZ, BUTTERWORTH_Q4[0]),
                Biquad::lowpass(fs, HIGH_CUTOFF_HZ, BUTTERWORTH_Q4[1]),
            ],
        }
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        self.stages.iter_mut().fold(x, |acc, s| s.process(acc))
    }

    pub fn filter(&mut self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.process(x)).collect()
    }

    pub fn reset(&mut self) {
        self.stages.iter_mut().for_each(Biquad::reset);
    }

    /// Magnitude response at `f_hz`.
    pub fn gain_at(&self, f_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / self.fs;
        self.stages
            .iter()
            .map(|s| {
                let (re, im) = s.response(w);
                (re * re + im * im).sqrt()
            })
            .product()
    }

    /// Group delay at `f_hz`, in samples.
    pub fn group_delay_samples(&self, f_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / self.fs;
        self.stages.iter().map(|s| s.group_delay(w)).sum()
    }
}
