//! ECG analysis: band-pass filtering, R-peak detection, heart rate and
//! rhythm classification.

pub mod analyzer;
pub mod filter;
pub mod qrs;
pub mod vitals;

pub use analyzer::{analyze_frames, AnalysisOutput, AnalyzerConfig, Block, DeviceAnalyzer};
pub use filter::Bandpass;
pub use qrs::{detect_peaks, DetectorConfig, PeakAnnotation, QrsDetector};
pub use vitals::{classify, heart_rate, rr_stats, Rhythm, RrStats, VitalsSnapshot};

use crate::device::{AdcReading, Frontend};

/// Dequantizes ADC codes to millivolts and band-passes them.
pub fn bandpass(codes: &[AdcReading], fs: f64, frontend: &Frontend) -> Vec<f64> {
    let mut bp = Bandpass::new(fs);
    codes
        .iter()
        .map(|c| bp.process(frontend.code_to_mv(c.0)))
        .collect()
}
