//! Property tests for the STFT and the channel-independent spectrogram.

use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;

use rffi_core::channel::{add_awgn, apply_channel, realize_channel, ChannelSpec};
use rffi_core::features::{featurize, spectrogram_db, stft, StftConfig, Window};
use rffi_core::lora_phy::{apply_impairments, make_preamble, sample_profiles, IqFrame, LoraConfig, ManufacturerCluster};

fn frame(re: &[f64], im: &[f64]) -> IqFrame {
    IqFrame::new(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(), 1e6).unwrap()
}

/// Textbook per-segment DFT, frequency index r - N/2 on row r.
fn dft_oracle(x: &[Complex64], n: usize, hop: usize, hann: bool) -> Vec<Vec<Complex64>> {
    let cols = (x.len() - n) / hop + 1;
    (0..cols)
        .map(|m| {
            (0..n)
                .map(|r| {
                    let k = r as f64 - (n / 2) as f64;
                    (0..n)
                        .map(|i| {
                            let w = if hann { 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()) } else { 1.0 };
                            x[m * hop + i] * w * Complex64::from_polar(1.0, -2.0 * PI * k * i as f64 / n as f64)
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn device_preamble(seed: u64) -> IqFrame {
    let cluster = &ManufacturerCluster::defaults()[1];
    let dev = sample_profiles(cluster, "p", 1, 1, seed).remove(0);
    apply_impairments(&make_preamble(&LoraConfig::default()).unwrap(), &dev, seed).unwrap()
}

fn mad(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_matches_direct_dft(
        (re, im) in (64usize..400).prop_flat_map(|len| (
            prop::collection::vec(-1.0f64..1.0, len),
            prop::collection::vec(-1.0f64..1.0, len),
        )),
        shape in prop::sample::select(vec![(16usize, 8usize), (32, 32), (64, 16), (32, 5)]),
        hann in any::<bool>(),
    ) {
        let (n, hop) = shape;
        let x = frame(&re, &im);
        let cfg = StftConfig { n_fft: n, hop, window: if hann { Window::Hann } else { Window::Rectangular } };
        let s = stft(&x, &cfg).unwrap();
        let want = dft_oracle(&x.samples, n, hop, hann);
        prop_assert_eq!(s.ncols(), want.len());
        prop_assert_eq!(s.ncols(), (x.len() - n) / hop + 1);
        let peak = want.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
        for (m, col) in want.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                prop_assert!((s[[r, m]] - v).norm() <= 1e-9 * peak);
            }
        }
    }

    #[test]
    fn parseval_per_column(
        (re, im) in (256usize..1200).prop_flat_map(|len| (
            prop::collection::vec(-1.0f64..1.0, len),
            prop::collection::vec(-1.0f64..1.0, len),
        )),
    ) {
        let x = frame(&re, &im);
        let cfg = StftConfig { window: Window::Rectangular, ..StftConfig::default() };
        let s = stft(&x, &cfg).unwrap();
        for m in 0..s.ncols() {
            let lhs: f64 = s.column(m).iter().map(|v| v.norm_sqr()).sum();
            let seg: f64 = x.samples[m * cfg.hop..m * cfg.hop + cfg.n_fft].iter().map(|v| v.norm_sqr()).sum();
            prop_assert!((lhs - cfg.n_fft as f64 * seg).abs() <= 1e-9 * lhs);
        }
    }

    #[test]
    fn ratio_map_has_one_column_fewer_and_ignores_flat_gain(
        mag in 0.01f64..100.0,
        phase in -PI..PI,
        seed in 0u64..1000,
    ) {
        let pre = device_preamble(seed);
        let g = Complex64::from_polar(mag, phase);
        let scaled = pre.derive(pre.samples.iter().map(|s| s * g).collect());
        let cfg = StftConfig::default();
        let a = featurize(&pre, &cfg, 40.0).unwrap();
        let b = featurize(&scaled, &cfg, 40.0).unwrap();
        prop_assert_eq!(a.shape().1, stft(&pre, &cfg).unwrap().ncols() - 1);
        let worst = a.values_db.iter().zip(&b.values_db).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "{}", worst);
    }
}

#[test]
fn static_multipath_cancels() {
    let pre = device_preamble(3);
    let spec = ChannelSpec {
        rms_delay_spread_s: 300e-9,
        max_doppler_hz: 0.0,
        rician_k: 0.0,
        snr_db: f64::INFINITY,
        max_path_index: None,
        seed: 17,
    };
    let rx = apply_channel(&pre, &realize_channel(&spec, pre.len(), pre.sample_rate_hz).unwrap()).unwrap();
    let cfg = StftConfig::default();
    let q = mad(&featurize(&rx, &cfg, 40.0).unwrap().values_db, &featurize(&pre, &cfg, 40.0).unwrap().values_db);
    let s = mad(
        &spectrogram_db(&stft(&rx, &cfg).unwrap()).values_db,
        &spectrogram_db(&stft(&pre, &cfg).unwrap()).values_db,
    );
    assert!(q < 0.5, "ratio map MAD {q} dB");
    assert!(s > q, "plain spectrogram should be more channel sensitive ({s} dB)");
}

#[test]
fn high_snr_features_are_stable() {
    let pre = device_preamble(4);
    let cfg = StftConfig::default();
    let a = featurize(&add_awgn(&pre, 80.0, 1).unwrap(), &cfg, 40.0).unwrap();
    let b = featurize(&add_awgn(&pre, 80.0, 2).unwrap(), &cfg, 40.0).unwrap();
    assert_eq!(a.shape(), (256, 62));
    let d = mad(&a.values_db, &b.values_db);
    assert!(d < 0.5, "MAD {d} dB");
}
