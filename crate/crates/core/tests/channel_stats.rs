//! Monte-Carlo properties of the fading channel and noise models.

use num_complex::Complex64;
use rustfft::FftPlanner;

use rffi_core::channel::{
    add_awgn, apply_channel, jakes_fading, realize_channel, AugmentRanges, ChannelSpec, Range,
};
use rffi_core::lora_phy::{make_preamble, make_upchirp, IqFrame, LoraConfig};

fn spec(tau: f64, fd: f64, k: f64, seed: u64) -> ChannelSpec {
    ChannelSpec {
        rms_delay_spread_s: tau,
        max_doppler_hz: fd,
        rician_k: k,
        snr_db: f64::INFINITY,
        max_path_index: None,
        seed,
    }
}

fn power(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

#[test]
fn jakes_ensemble_mean_power_is_one() {
    // 10^6 samples pooled over independent realizations.
    let mut total = 0.0;
    let seeds = 4000;
    for seed in 0..seeds {
        total += power(&jakes_fading(250, 10.0, 1e6, seed).unwrap());
    }
    let mean = total / seeds as f64;
    assert!((mean - 1.0).abs() < 0.05, "ensemble power {mean}");
}

#[test]
fn jakes_spectrum_is_band_limited() {
    let (n, fs, fd) = (1 << 17, 10_000.0, 50.0);
    let g = jakes_fading(n, fd, fs, 5).unwrap();
    let mut buf: Vec<Complex64> = g
        .iter()
        .enumerate()
        .map(|(i, v)| v * (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let total: f64 = buf.iter().map(|v| v.norm_sqr()).sum();
    let inside: f64 = buf
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = if *k < n / 2 { *k as f64 } else { *k as f64 - n as f64 } * fs / n as f64;
            f.abs() <= 55.0
        })
        .map(|(_, v)| v.norm_sqr())
        .sum();
    assert!(inside / total >= 0.95, "in-band fraction {}", inside / total);
}

#[test]
fn expected_tap_power_sums_to_one() {
    let seeds = 10_000;
    let mut total = 0.0;
    for seed in 0..seeds {
        let ch = realize_channel(&spec(300e-9, 0.0, 0.0, seed), 1, 1e6).unwrap();
        total += ch.mean_total_power();
    }
    let mean = total / seeds as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean tap power {mean}");
}

#[test]
fn channel_conserves_energy_in_expectation() {
    let sym = make_upchirp(&LoraConfig::default()).unwrap();
    let ranges = AugmentRanges {
        snr_db: Range::fixed(f64::INFINITY),
        ..AugmentRanges::default()
    };
    let seeds = 2000;
    let mut total = 0.0;
    for seed in 0..seeds {
        let s = ranges.draw(seed).unwrap();
        let ch = realize_channel(&s, sym.len(), sym.sample_rate_hz).unwrap();
        total += apply_channel(&sym, &ch).unwrap().power() / sym.power();
    }
    let mean = total / seeds as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean power gain {mean}");
}

#[test]
fn awgn_seeds_differ_but_snr_matches() {
    let pre = make_preamble(&LoraConfig::default()).unwrap();
    let measure = |seed| {
        let y = add_awgn(&pre, 20.0, seed).unwrap();
        let noise: Vec<Complex64> = y.samples.iter().zip(&pre.samples).map(|(a, b)| a - b).collect();
        let snr = 10.0 * (pre.power() / power(&noise)).log10();
        (noise, snr)
    };
    let (n1, snr1) = measure(1);
    let (n2, snr2) = measure(2);
    assert_ne!(n1, n2);
    assert!((snr1 - 20.0).abs() < 0.5 && (snr2 - 20.0).abs() < 0.5, "{snr1} {snr2}");
    assert!((snr1 - snr2).abs() < 0.5);
}

/// Energy of each preamble symbol after the channel, skipping the first
/// few samples of delay spread.
fn symbol_energies(rx: &IqFrame, l: usize) -> Vec<f64> {
    rx.samples
        .chunks(l)
        .map(|c| c[8..].iter().map(|v| v.norm_sqr()).sum())
        .collect()
}

#[test]
fn static_multipath_is_periodic_and_doppler_is_not() {
    let cfg = LoraConfig::default();
    let pre = make_preamble(&cfg).unwrap();
    let l = cfg.samples_per_symbol();

    let ch = realize_channel(&spec(300e-9, 0.0, 0.0, 11), pre.len(), cfg.sample_rate_hz).unwrap();
    let rx = apply_channel(&pre, &ch).unwrap();
    for k in 1..cfg.n_preamble_symbols {
        for i in 8..l {
            let (a, b) = (rx.samples[i].norm(), rx.samples[k * l + i].norm());
            assert!((a - b).abs() <= 1e-9 * a.max(1e-12), "symbol {k} sample {i}");
        }
    }
    // The sawtooth comes from multipath: the envelope within a symbol is
    // not flat.
    let env: Vec<f64> = rx.samples[8..l].iter().map(|v| v.norm()).collect();
    let (lo, hi) = env.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(hi - lo > 1e-3 * hi);

    let ch = realize_channel(&spec(300e-9, 10.0, 0.0, 11), pre.len(), cfg.sample_rate_hz).unwrap();
    let e = symbol_energies(&apply_channel(&pre, &ch).unwrap(), l);
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let spread = e.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / mean;
    assert!(spread > 1e-3, "doppler channel left symbol energies flat ({spread})");
}
