use cardiolink::analysis::{
    detect_peaks, AnalysisOutput, AnalyzerConfig, Block, DeviceAnalyzer, QrsDetector,
};
use cardiolink::device::{sample_ecg, DeviceConfig, LeadState};
use cardiolink::ecg_synth::{generate, Morphology, NoiseSpec, RhythmMode, RhythmPlan};
use cardiolink::wire::DeviceId;
use proptest::prelude::*;

fn signal(bpm: f64, jitter: f64, noise: f64, seed: u64, secs: f64) -> Vec<f64> {
    generate(
        secs,
        250.0,
        &RhythmPlan::new(bpm, jitter, RhythmMode::Normal, seed),
        &Morphology::default(),
        &NoiseSpec::white(noise),
    )
    .unwrap()
    .samples
}

fn indices(xs: &[f64]) -> Vec<u64> {
    detect_peaks(xs, 250.0).iter().map(|p| p.index).collect()
}

fn analyze_in_chunks(codes: &[u16], cuts: &[usize]) -> AnalysisOutput {
    let mut a = DeviceAnalyzer::new(DeviceId::default(), AnalyzerConfig::default());
    let mut out = AnalysisOutput::default();
    let mut at = 0usize;
    let mut i = 0;
    while at < codes.len() {
        let n = cuts.get(i % cuts.len().max(1)).copied().unwrap_or(codes.len()).min(codes.len() - at);
        a.push_block(
            Block {
                t_start_us: 1_700_000_000_000_000 + at as u64 * 4_000,
                fs: 250,
                codes: &codes[at..at + n],
                lead_off: false,
                sensors: None,
            },
            &mut out,
        );
        at += n;
        i += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shifting_input_shifts_peaks(
        bpm in 45.0f64..140.0,
        seed in any::<u64>(),
        k in 0usize..2000,
        noise in 0.0f64..0.1,
    ) {
        let x = signal(bpm, 0.03, noise, seed, 20.0);
        let mut shifted = vec![0.0; k];
        shifted.extend_from_slice(&x);
        let a = indices(&x);
        let b = indices(&shifted);
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p + k as u64, *q);
        }
    }

    #[test]
    fn scaling_amplitude_keeps_peak_times(
        bpm in 45.0f64..140.0,
        seed in any::<u64>(),
        c in 0.5f64..2.0,
        noise in 0.0f64..0.1,
    ) {
        let x = signal(bpm, 0.03, noise, seed, 20.0);
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        let a = indices(&x);
        let b = indices(&y);
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(p.abs_diff(*q) <= 1);
        }
    }

    #[test]
    fn peaks_respect_refractory(
        bpm in 30.0f64..200.0,
        jitter in 0.0f64..0.3,
        noise in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let x = signal(bpm, jitter, noise, seed, 20.0);
        let idx = indices(&x);
        for w in idx.windows(2) {
            prop_assert!(w[1] - w[0] >= 50, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn detector_chunking_is_invisible(
        seed in any::<u64>(),
        cuts in prop::collection::vec(1usize..=4096, 1..20),
    ) {
        let x = signal(80.0, 0.1, 0.05, seed, 30.0);
        let whole = detect_peaks(&x, 250.0);
        let mut det = QrsDetector::new(250.0);
        let mut got = Vec::new();
        let mut at = 0;
        for c in cuts.iter().cycle() {
            if at >= x.len() {
                break;
            }
            let end = (at + c).min(x.len());
            det.push_slice(&x[at..end], &mut got);
            at = end;
        }
        prop_assert_eq!(got, whole);
    }

    #[test]
    fn analyzer_chunking_is_invisible(
        bpm in 45.0f64..140.0,
        seed in any::<u64>(),
        cuts in prop::collection::vec(1usize..=4096, 1..20),
    ) {
        let x = generate(40.0, 250.0, &RhythmPlan::new(bpm, 0.05, RhythmMode::Normal, seed), &Morphology::default(), &NoiseSpec::white(0.03)).unwrap();
        let codes: Vec<u16> = sample_ecg(&x, LeadState::CONNECTED, &DeviceConfig::default()).unwrap().into_iter().map(|r| r.0).collect();
        let whole = analyze_in_chunks(&codes, &[codes.len()]);
        let chunked = analyze_in_chunks(&codes, &cuts);
        prop_assert_eq!(&chunked, &whole);
        for s in &whole.snapshots {
            if let (Some(b), Some(m)) = (s.bpm, s.rr_mean) {
                // Exact up to the two roundings of 60 / m * m.
                prop_assert!((b * m - 60.0).abs() <= 2.0 * 60.0 * f64::EPSILON);
            }
        }
    }
}
