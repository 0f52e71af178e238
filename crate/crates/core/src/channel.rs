//! Time-varying multipath channel, AWGN and training-set augmentation.
//!
//! A channel realization is a tapped delay line on the integer sample grid.
//! Tap `p` sits at delay `p` samples with average power from a normalized
//! exponential power delay profile. Every tap fades independently with a
//! Jakes (sum-of-sinusoids) Doppler process; tap 0 additionally carries a
//! static line-of-sight component set by the Rician K-factor.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_phy::{mean_power, IqFrame};
use crate::util::serde_f64;

/// Sinusoids per Jakes fading process.
pub const JAKES_SINUSOIDS: usize = 32;

/// Maximum number of taps the default path-count rule produces.
pub const MAX_DEFAULT_TAPS: usize = 8;

/// One channel realization's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub rms_delay_spread_s: f64,
    pub max_doppler_hz: f64,
    /// Linear K-factor of tap 0; `inf` for a pure line-of-sight tap.
    #[serde(with = "serde_f64")]
    pub rician_k: f64,
    /// `inf` disables noise.
    #[serde(with = "serde_f64")]
    pub snr_db: f64,
    /// Index of the last path; `None` applies the default rule.
    #[serde(default)]
    pub max_path_index: Option<usize>,
    pub seed: u64,
}

impl ChannelSpec {
    /// Line-of-sight flat channel without fading or noise.
    pub fn identity() -> Self {
        Self {
            rms_delay_spread_s: 0.0,
            max_doppler_hz: 0.0,
            rician_k: f64::INFINITY,
            snr_db: f64::INFINITY,
            max_path_index: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rms_delay_spread_s >= 0.0 && self.rms_delay_spread_s.is_finite()) {
            return Err(Error::Config(format!(
                "RMS delay spread {} s",
                self.rms_delay_spread_s
            )));
        }
        if !(self.max_doppler_hz >= 0.0 && self.max_doppler_hz.is_finite()) {
            return Err(Error::Config(format!("max Doppler {} Hz", self.max_doppler_hz)));
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::Config(format!("Rician K {}", self.rician_k)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("SNR {} dB", self.snr_db)));
        }
        Ok(())
    }

    /// `p_max` actually used at sample interval `ts`: zero for a flat
    /// channel, otherwise the explicit value or the smallest `p` whose
    /// unnormalized PDP falls below `1e-3 * P(0)`, capped at
    /// [`MAX_DEFAULT_TAPS`] taps.
    pub fn effective_max_path_index(&self, ts: f64) -> usize {
        if self.rms_delay_spread_s == 0.0 {
            return 0;
        }
        if let Some(p) = self.max_path_index {
            return p;
        }
        let p = (self.rms_delay_spread_s / ts * 1e3f64.ln()).floor() as usize + 1;
        p.min(MAX_DEFAULT_TAPS - 1)
    }
}

/// Discrete exponential PDP `P(p) = exp(-p ts / tau_d) / tau_d`, normalized
/// to unit sum.
pub fn exponential_pdp(spec: &ChannelSpec, ts: f64) -> Result<Vec<f64>> {
    if spec.rms_delay_spread_s <= 0.0 {
        return Err(Error::DegeneratePdp(
            "zero RMS delay spread; use a flat channel".into(),
        ));
    }
    let tau = spec.rms_delay_spread_s;
    let p_max = spec.effective_max_path_index(ts);
    let raw: Vec<f64> = (0..=p_max)
        .map(|p| (-(p as f64) * ts / tau).exp() / tau)
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Unit-power complex fading process with a Jakes Doppler spectrum.
///
/// Sum of [`JAKES_SINUSOIDS`] equal-strength phasors whose arrival angles
/// are stratified over `(0, pi)` with random offsets and whose phases are
/// uniform. Since `f_d cos(alpha)` with `alpha` uniform on `(0, pi)` has
/// exactly the Jakes density, the line spectrum approximates
/// `1 / (pi f_d sqrt(1 - (f/f_d)^2))`. With `fd_hz == 0` every phasor is
/// static, so the gain is a constant draw of the same unit-power process.
pub fn jakes_fading(n_samples: usize, fd_hz: f64, fs_hz: f64, seed: u64) -> Result<Vec<Complex64>> {
    if !(fd_hz >= 0.0 && fd_hz < fs_hz / 2.0) {
        return Err(Error::Config(format!(
            "max Doppler {fd_hz} Hz must lie in [0, fs/2 = {} Hz)",
            fs_hz / 2.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = JAKES_SINUSOIDS;
    let amp = 1.0 / (m as f64).sqrt();
    let mut phasors = Vec::with_capacity(m);
    let mut steps = Vec::with_capacity(m);
    for i in 0..m {
        let alpha = PI * (i as f64 + rng.random::<f64>()) / m as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let omega = 2.0 * PI * fd_hz * alpha.cos() / fs_hz;
        phasors.push((phase, omega));
        steps.push(Complex64::from_polar(1.0, omega));
    }
    if fd_hz == 0.0 {
        let g: Complex64 = phasors
            .iter()
            .map(|&(phase, _)| Complex64::from_polar(amp, phase))
            .sum();
        return Ok(vec![g; n_samples]);
    }

    // Phasors advance by recurrence and are re-anchored exactly every
    // block to keep rounding drift below 1e-12.
    const ANCHOR: usize = 4096;
    let mut out = Vec::with_capacity(n_samples);
    let mut current: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); m];
    for n in 0..n_samples {
        if n % ANCHOR == 0 {
            for (c, &(phase, omega)) in current.iter_mut().zip(&phasors) {
                *c = Complex64::from_polar(amp, phase + omega * n as f64);
            }
        }
        out.push(current.iter().sum());
        for (c, s) in current.iter_mut().zip(&steps) {
            *c *= s;
        }
    }
    Ok(out)
}

/// Sampled time-varying impulse response `h(tau, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// Shape `(n_samples, n_taps)`.
    pub tap_gains: Array2<Complex64>,
    pub tap_delays_samples: Vec<usize>,
}

impl ChannelRealization {
    pub fn n_samples(&self) -> usize {
        self.tap_gains.nrows()
    }

    pub fn n_taps(&self) -> usize {
        self.tap_gains.ncols()
    }

    /// Mean over time of the summed tap power.
    pub fn mean_total_power(&self) -> f64 {
        self.tap_gains.iter().map(|g| g.norm_sqr()).sum::<f64>() / self.n_samples().max(1) as f64
    }
}

/// Draws a channel realization of `n_samples` at rate `fs_hz`.
pub fn realize_channel(spec: &ChannelSpec, n_samples: usize, fs_hz: f64) -> Result<ChannelRealization> {
    spec.validate()?;
    let ts = 1.0 / fs_hz;
    let pdp = if spec.rms_delay_spread_s == 0.0 {
        vec![1.0]
    } else {
        exponential_pdp(spec, ts)?
    };
    let (los, diffuse) = if spec.rician_k.is_infinite() {
        (1.0, 0.0)
    } else {
        let k = spec.rician_k;
        ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt())
    };

    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tap_gains = Array2::zeros((n_samples, pdp.len()));
    for (p, &power) in pdp.iter().enumerate() {
        let tap_seed = seeds.next_u64();
        let amp = power.sqrt();
        let (los_amp, diffuse_amp) = if p == 0 { (los, diffuse) } else { (0.0, 1.0) };
        let mut column = tap_gains.column_mut(p);
        if diffuse_amp == 0.0 {
            column.fill(Complex64::new(amp * los_amp, 0.0));
            continue;
        }
        let fading = jakes_fading(n_samples, spec.max_doppler_hz, fs_hz, tap_seed)?;
        for (g, f) in column.iter_mut().zip(fading) {
            *g = amp * (Complex64::new(los_amp, 0.0) + diffuse_amp * f);
        }
    }
    Ok(ChannelRealization {
        tap_gains,
        tap_delays_samples: (0..pdp.len()).collect(),
    })
}

/// Time-varying FIR: `y[n] = sum_p h[n, p] s[n - d_p]`.
pub fn apply_channel(frame: &IqFrame, ch: &ChannelRealization) -> Result<IqFrame> {
    if frame.len() != ch.n_samples() {
        return Err(Error::Contract(format!(
            "frame has {} samples but channel realization has {}",
            frame.len(),
            ch.n_samples()
        )));
    }
    let s = &frame.samples;
    let out = (0..s.len())
        .map(|n| {
            let row = ch.tap_gains.row(n);
            row.iter()
                .zip(&ch.tap_delays_samples)
                .filter(|(_, &d)| d <= n)
                .map(|(g, &d)| g * s[n - d])
                .sum()
        })
        .collect();
    Ok(frame.derive(out))
}

/// Adds circular white Gaussian noise at `snr_db` relative to the frame's
/// own mean power. `snr_db = inf` returns the frame unchanged.
pub fn add_awgn(frame: &IqFrame, snr_db: f64, seed: u64) -> Result<IqFrame> {
    add_awgn_with_reference(frame, frame.power(), snr_db, seed)
}

/// Like [`add_awgn`] but with an explicit signal power reference, for frames
/// that include silent padding around the signal.
pub fn add_awgn_with_reference(
    frame: &IqFrame,
    signal_power: f64,
    snr_db: f64,
    seed: u64,
) -> Result<IqFrame> {
    if snr_db == f64::INFINITY {
        return Ok(frame.clone());
    }
    if !(signal_power > 0.0) {
        return Err(Error::Contract("cannot set SNR of a zero-power frame".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR {snr_db} dB")));
    }
    let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
    let sigma = (noise_power / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = frame
        .samples
        .iter()
        .map(|s| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            s + Complex64::new(re, im) * sigma
        })
        .collect();
    Ok(frame.derive(out))
}

/// Passes `frame` through a fresh realization of `spec` and adds noise.
pub fn transmit(frame: &IqFrame, spec: &ChannelSpec) -> Result<IqFrame> {
    transmit_segment(frame, spec, 0..frame.len())
}

/// [`transmit`] with the SNR referenced to the faded power over `signal`
/// only, so silent padding around a packet does not dilute it.
pub fn transmit_segment(frame: &IqFrame, spec: &ChannelSpec, signal: std::ops::Range<usize>) -> Result<IqFrame> {
    if signal.is_empty() || signal.end > frame.len() {
        return Err(Error::Contract(format!(
            "signal window {signal:?} outside frame of {} samples",
            frame.len()
        )));
    }
    let ch = realize_channel(spec, frame.len(), frame.sample_rate_hz)?;
    let faded = apply_channel(frame, &ch)?;
    let noise_seed = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
    let reference = mean_power(&faded.samples[signal]);
    let mut out = if spec.snr_db == f64::INFINITY {
        faded
    } else {
        add_awgn_with_reference(&faded, reference, spec.snr_db, noise_seed)?
    };
    out.meta.insert("channel_seed".into(), spec.seed.to_string());
    Ok(out)
}

/// Closed interval a parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    #[serde(with = "serde_f64")]
    pub lo: f64,
    #[serde(with = "serde_f64")]
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.lo.is_nan() || self.hi.is_nan() || self.lo > self.hi {
            return Err(Error::Config(format!("{name}: invalid range [{}, {}]", self.lo, self.hi)));
        }
        if self.lo != self.hi && !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::Config(format!("{name}: infinite bounds must be a fixed value")));
        }
        Ok(())
    }
}

/// Ranges for augmentation channel draws. Defaults are the channel
/// simulator ranges used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub rms_delay_spread_s: Range,
    pub max_doppler_hz: Range,
    pub rician_k: Range,
    pub snr_db: Range,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rms_delay_spread_s: Range::new(5e-9, 300e-9),
            max_doppler_hz: Range::new(0.0, 10.0),
            rician_k: Range::new(0.0, 10.0),
            snr_db: Range::new(20.0, 80.0),
        }
    }
}

impl AugmentRanges {
    /// Default ranges with Doppler pinned to zero (multipath only).
    pub fn without_doppler() -> Self {
        Self {
            max_doppler_hz: Range::fixed(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rms_delay_spread_s.validate("rms_delay_spread_s")?;
        self.max_doppler_hz.validate("max_doppler_hz")?;
        self.rician_k.validate("rician_k")?;
        self.snr_db.validate("snr_db")
    }

    pub fn contains(&self, spec: &ChannelSpec) -> bool {
        self.rms_delay_spread_s.contains(spec.rms_delay_spread_s)
            && self.max_doppler_hz.contains(spec.max_doppler_hz)
            && self.rician_k.contains(spec.rician_k)
            && self.snr_db.contains(spec.snr_db)
    }

    /// Uniform draw of every parameter; the returned spec's own seed is
    /// also derived from `seed`.
    pub fn draw(&self, seed: u64) -> Result<ChannelSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ChannelSpec {
            rms_delay_spread_s: self.rms_delay_spread_s.draw(&mut rng),
            max_doppler_hz: self.max_doppler_hz.draw(&mut rng),
            rician_k: self.rician_k.draw(&mut rng),
            snr_db: self.snr_db.draw(&mut rng),
            max_path_index: None,
            seed: rng.next_u64(),
        })
    }
}

/// One augmentation pass: draw a channel from `ranges`, apply it, add noise.
pub fn augment(frame: &IqFrame, ranges: &AugmentRanges, seed: u64) -> Result<IqFrame> {
    augment_with_spec(frame, ranges, seed).map(|(f, _)| f)
}

/// [`augment`] that also returns the drawn channel parameters.
pub fn augment_with_spec(
    frame: &IqFrame,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<(IqFrame, ChannelSpec)> {
    let spec = ranges.draw(seed)?;
    let out = transmit(frame, &spec)?.with_meta("stage", "augmented");
    Ok((out, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora_phy::{make_preamble, LoraConfig};

    fn spec(tau: f64, fd: f64, k: f64) -> ChannelSpec {
        ChannelSpec {
            rms_delay_spread_s: tau,
            max_doppler_hz: fd,
            rician_k: k,
            snr_db: f64::INFINITY,
            max_path_index: None,
            seed: 3,
        }
    }

    #[test]
    fn pdp_sums_to_one() {
        for tau in [5e-9, 50e-9, 300e-9, 2e-6] {
            let pdp = exponential_pdp(&spec(tau, 0.0, 0.0), 1e-6).unwrap();
            assert!((pdp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pdp_single_tap() {
        let s = ChannelSpec {
            max_path_index: Some(0),
            ..spec(300e-9, 0.0, 0.0)
        };
        assert_eq!(exponential_pdp(&s, 1e-6).unwrap(), vec![1.0]);
    }

    #[test]
    fn pdp_decay_ratio() {
        let s = ChannelSpec {
            max_path_index: Some(3),
            ..spec(300e-9, 0.0, 0.0)
        };
        let pdp = exponential_pdp(&s, 1e-6).unwrap();
        let expected = (-1.0f64 / 0.3).exp();
        assert!((expected - 0.03567).abs() < 1e-5);
        for w in pdp.windows(2) {
            assert!((w[1] / w[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pdp_zero_spread_is_degenerate() {
        assert!(matches!(
            exponential_pdp(&spec(0.0, 0.0, 0.0), 1e-6),
            Err(Error::DegeneratePdp(_))
        ));
    }

    #[test]
    fn default_path_count_rule() {
        // 300 ns: exp(-2/0.3) > 1e-3 > exp(-3/0.3)
        assert_eq!(spec(300e-9, 0.0, 0.0).effective_max_path_index(1e-6), 3);
        assert_eq!(spec(5e-9, 0.0, 0.0).effective_max_path_index(1e-6), 1);
        assert_eq!(spec(0.0, 0.0, 0.0).effective_max_path_index(1e-6), 0);
        assert_eq!(spec(10e-6, 0.0, 0.0).effective_max_path_index(1e-6), 7);
    }

    #[test]
    fn jakes_static_when_no_doppler() {
        let g = jakes_fading(1000, 0.0, 1e6, 11).unwrap();
        assert!(g.iter().all(|&v| v == g[0]));
    }

    #[test]
    fn jakes_rejects_doppler_above_nyquist() {
        assert!(jakes_fading(10, 5e5, 1e6, 0).is_err());
        assert!(jakes_fading(10, -1.0, 1e6, 0).is_err());
    }

    #[test]
    fn jakes_deterministic() {
        let a = jakes_fading(5000, 10.0, 1e6, 5).unwrap();
        let b = jakes_fading(5000, 10.0, 1e6, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_los_flat_channel() {
        let ch = realize_channel(&spec(0.0, 0.0, f64::INFINITY), 100, 1e6).unwrap();
        assert_eq!(ch.n_taps(), 1);
        assert!(ch.tap_gains.iter().all(|g| *g == Complex64::new(1.0, 0.0)));
        let ch = realize_channel(&spec(0.0, 0.0, 1e9), 100, 1e6).unwrap();
        assert!(ch.tap_gains.iter().all(|g| (g.norm() - 1.0).abs() < 1e-4));
    }

    #[test]
    fn zero_doppler_freezes_taps() {
        let ch = realize_channel(&spec(300e-9, 0.0, 2.0), 2000, 1e6).unwrap();
        assert_eq!(ch.n_taps(), 4);
        for col in ch.tap_gains.columns() {
            assert!(col.iter().all(|&g| g == col[0]));
        }
    }

    #[test]
    fn identity_tap_passes_frame() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        let ch = realize_channel(&ChannelSpec::identity(), frame.len(), 1e6).unwrap();
        assert_eq!(apply_channel(&frame, &ch).unwrap().samples, frame.samples);
    }

    #[test]
    fn zero_taps_give_zero_output() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        let ch = ChannelRealization {
            tap_gains: Array2::zeros((frame.len(), 2)),
            tap_delays_samples: vec![0, 1],
        };
        let out = apply_channel(&frame, &ch).unwrap();
        assert!(out.samples.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn channel_shape_mismatch() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        let ch = realize_channel(&ChannelSpec::identity(), 10, 1e6).unwrap();
        assert!(matches!(apply_channel(&frame, &ch), Err(Error::Contract(_))));
    }

    #[test]
    fn two_ray_tone_response() {
        // Pure tone through two equal-power static taps at delays 0 and d.
        let fs = 1e6;
        let f = 37_000.0;
        let d = 3;
        let n = 4096;
        let tone: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * f * i as f64 / fs))
            .collect();
        let frame = IqFrame::new(tone, fs).unwrap();
        let mut tap_gains = Array2::zeros((n, 2));
        tap_gains.column_mut(0).fill(Complex64::new(0.5f64.sqrt(), 0.0));
        tap_gains.column_mut(1).fill(Complex64::new(0.5f64.sqrt(), 0.0));
        let ch = ChannelRealization {
            tap_gains,
            tap_delays_samples: vec![0, d],
        };
        let out = apply_channel(&frame, &ch).unwrap();
        let expected = (Complex64::new(1.0, 0.0)
            + Complex64::from_polar(1.0, -2.0 * PI * f * d as f64 / fs))
        .norm()
            / 2f64.sqrt();
        for s in &out.samples[d..] {
            assert!((s.norm() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn awgn_infinite_snr_is_identity() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        assert_eq!(add_awgn(&frame, f64::INFINITY, 1).unwrap(), frame);
    }

    #[test]
    fn awgn_zero_power_rejected() {
        let frame = IqFrame::new(vec![Complex64::new(0.0, 0.0); 8], 1e6).unwrap();
        assert!(matches!(add_awgn(&frame, 10.0, 1), Err(Error::Contract(_))));
    }

    fn measured_snr(clean: &IqFrame, noisy: &IqFrame) -> f64 {
        let noise: f64 = clean
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(a, b)| (b - a).norm_sqr())
            .sum::<f64>()
            / clean.len() as f64;
        10.0 * (clean.power() / noise).log10()
    }

    #[test]
    fn awgn_hits_requested_snr() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        let a = add_awgn(&frame, 20.0, 1).unwrap();
        let b = add_awgn(&frame, 20.0, 2).unwrap();
        assert_ne!(a.samples, b.samples);
        let (sa, sb) = (measured_snr(&frame, &a), measured_snr(&frame, &b));
        assert!((sa - 20.0).abs() < 0.5, "{sa}");
        assert!((sb - 20.0).abs() < 0.5, "{sb}");
        assert!((sa - sb).abs() < 0.5);
    }

    #[test]
    fn collapsed_ranges_are_identity() {
        let frame = make_preamble(&LoraConfig::default()).unwrap();
        let ranges = AugmentRanges {
            rms_delay_spread_s: Range::fixed(0.0),
            max_doppler_hz: Range::fixed(0.0),
            rician_k: Range::fixed(f64::INFINITY),
            snr_db: Range::fixed(f64::INFINITY),
        };
        let out = augment(&frame, &ranges, 9).unwrap();
        assert_eq!(out.samples, frame.samples);
    }

    #[test]
    fn default_draws_stay_in_ranges() {
        let ranges = AugmentRanges::default();
        for seed in 0..500 {
            let s = ranges.draw(seed).unwrap();
            assert!(ranges.contains(&s), "{s:?}");
            assert!(s.rms_delay_spread_s >= 5e-9 && s.rms_delay_spread_s <= 300e-9);
            assert!(s.max_doppler_hz <= 10.0);
            assert!(s.rician_k <= 10.0);
            assert!(s.snr_db >= 20.0 && s.snr_db <= 80.0);
        }
    }

    #[test]
    fn doppler_free_augmentation_has_static_taps() {
        let ranges = AugmentRanges::without_doppler();
        for seed in 0..20 {
            let s = ranges.draw(seed).unwrap();
            assert_eq!(s.max_doppler_hz, 0.0);
            let ch = realize_channel(&s, 512, 1e6).unwrap();
            for col in ch.tap_gains.columns() {
                assert!(col.iter().all(|&g| g == col[0]));
            }
        }
    }

    #[test]
    fn spec_serializes_infinities() {
        let s = ChannelSpec::identity();
        let json = serde_json::to_string(&s).unwrap();
        let back: ChannelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
