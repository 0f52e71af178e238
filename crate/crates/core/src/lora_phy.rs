//! Baseband LoRa preamble synthesis and transmitter impairments.
//!
//! The up-chirp sweeps linearly from `-bw/2` to `+bw/2` over one symbol of
//! duration `T = 2^SF / bw`. A preamble is a run of identical up-chirps.
//!
//! Transmitter hardware is modelled as a direct-conversion chain applied in
//! a fixed order:
//!
//! ```text
//! IQ imbalance -> DC offset -> PA polynomial -> phase noise -> CFO
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio parameters for preamble synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub spreading_factor: u8,
    pub bandwidth_hz: f64,
    pub sample_rate_hz: f64,
    pub n_preamble_symbols: usize,
    pub amplitude: f64,
}

impl Default for LoraConfig {
    /// SF7 / 125 kHz sampled at 1 MHz with eight preamble symbols: 8192
    /// samples, which gives 63 STFT columns at N=256, R=128.
    fn default() -> Self {
        Self {
            spreading_factor: 7,
            bandwidth_hz: 125e3,
            sample_rate_hz: 1e6,
            n_preamble_symbols: 8,
            amplitude: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(5..=12).contains(&self.spreading_factor) {
            return Err(Error::Config(format!(
                "spreading factor {} outside [5, 12]",
                self.spreading_factor
            )));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::Config(format!("bandwidth {} Hz", self.bandwidth_hz)));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample rate {} Hz",
                self.sample_rate_hz
            )));
        }
        let ratio = self.sample_rate_hz / self.bandwidth_hz;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "sample rate {} Hz is not an integer multiple of bandwidth {} Hz",
                self.sample_rate_hz, self.bandwidth_hz
            )));
        }
        if self.n_preamble_symbols == 0 {
            return Err(Error::Config("preamble needs at least one symbol".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude {}", self.amplitude)));
        }
        Ok(())
    }

    /// Symbol duration `T` in seconds.
    pub fn symbol_duration(&self) -> f64 {
        f64::from(1u32 << self.spreading_factor) / self.bandwidth_hz
    }

    pub fn sample_interval(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn oversampling(&self) -> usize {
        (self.sample_rate_hz / self.bandwidth_hz).round() as usize
    }

    pub fn samples_per_symbol(&self) -> usize {
        (1usize << self.spreading_factor) * self.oversampling()
    }

    pub fn preamble_len(&self) -> usize {
        self.samples_per_symbol() * self.n_preamble_symbols
    }
}

/// A block of complex baseband samples with its sample rate and free-form
/// provenance tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqFrame {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub meta: BTreeMap<String, String>,
}

impl IqFrame {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        let frame = Self {
            samples,
            sample_rate_hz,
            meta: BTreeMap::new(),
        };
        frame.check()?;
        Ok(frame)
    }

    /// Checks the frame invariants: nonempty with finite samples.
    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Contract("empty frame".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of `|s|^2`.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    /// A new frame over `samples` carrying this frame's rate and tags.
    pub fn derive(&self, samples: Vec<Complex64>) -> Self {
        Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
            meta: self.meta.clone(),
        }
    }
}

pub(crate) fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// One base up-chirp `A exp(j2pi(-bw/2 + bw/(2T) t) t)` for `t` in `[0, T)`.
pub fn make_upchirp(cfg: &LoraConfig) -> Result<IqFrame> {
    cfg.validate()?;
    let n = cfg.samples_per_symbol();
    let ts = cfg.sample_interval();
    let bw = cfg.bandwidth_hz;
    let slope = bw / (2.0 * cfg.symbol_duration());
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 * ts;
            let phase = 2.0 * PI * (-bw / 2.0 + slope * t) * t;
            Complex64::from_polar(cfg.amplitude, phase)
        })
        .collect();
    Ok(IqFrame::new(samples, cfg.sample_rate_hz)?.with_meta("stage", "upchirp"))
}

/// `n_preamble_symbols` back-to-back copies of the base up-chirp.
pub fn make_preamble(cfg: &LoraConfig) -> Result<IqFrame> {
    let chirp = make_upchirp(cfg)?;
    let mut samples = Vec::with_capacity(cfg.preamble_len());
    for _ in 0..cfg.n_preamble_symbols {
        samples.extend_from_slice(&chirp.samples);
    }
    Ok(IqFrame::new(samples, cfg.sample_rate_hz)?.with_meta("stage", "preamble"))
}

/// Per-device transmitter impairment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    pub cfo_hz: f64,
    /// Linear gain of the Q path relative to the I path.
    pub iq_gain_imbalance: f64,
    pub iq_phase_imbalance_rad: f64,
    pub dc_offset: Complex64,
    /// Coefficients of `x |x|^0, x |x|^2, x |x|^4`.
    pub pa_coeffs: Vec<Complex64>,
    /// Standard deviation of the per-sample phase random-walk increment.
    pub phase_noise_std_rad: f64,
}

impl DeviceProfile {
    /// A transmitter with no impairments at all.
    pub fn ideal(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            cfo_hz: 0.0,
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance_rad: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            pa_coeffs: vec![Complex64::new(1.0, 0.0)],
            phase_noise_std_rad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(linear) = self.pa_coeffs.first() else {
            return Err(Error::Config(format!("{}: empty PA polynomial", self.device_id)));
        };
        if self.pa_coeffs.len() > 3 {
            return Err(Error::Config(format!(
                "{}: PA polynomial limited to orders 1, 3, 5",
                self.device_id
            )));
        }
        let g = linear.norm();
        if !(g > 0.5 && g < 2.0) {
            return Err(Error::Config(format!(
                "{}: PA linear gain magnitude {g} outside (0.5, 2.0)",
                self.device_id
            )));
        }
        if !(self.phase_noise_std_rad >= 0.0) {
            return Err(Error::Config(format!(
                "{}: negative phase noise",
                self.device_id
            )));
        }
        if !(self.iq_gain_imbalance > 0.0) {
            return Err(Error::Config(format!(
                "{}: IQ gain imbalance must be positive",
                self.device_id
            )));
        }
        let finite = [self.cfo_hz, self.iq_gain_imbalance, self.iq_phase_imbalance_rad]
            .iter()
            .all(|v| v.is_finite())
            && self.dc_offset.is_finite()
            && self.pa_coeffs.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::Config(format!("{}: non-finite parameter", self.device_id)));
        }
        Ok(())
    }
}

/// Applies the device's transmit chain to `frame`. The phase-noise walk is
/// drawn from `seed`, so the result is a pure function of its arguments.
pub fn apply_impairments(frame: &IqFrame, dev: &DeviceProfile, seed: u64) -> Result<IqFrame> {
    frame.check()?;
    dev.validate()?;
    let ts = 1.0 / frame.sample_rate_hz;

    // y = mu x + nu conj(x)  <=>  I' = I, Q' = g (Q cos phi - I sin phi)
    let g = dev.iq_gain_imbalance;
    let phi = dev.iq_phase_imbalance_rad;
    let mu = (Complex64::new(1.0, 0.0) + g * Complex64::from_polar(1.0, -phi)) * 0.5;
    let nu = (Complex64::new(1.0, 0.0) - g * Complex64::from_polar(1.0, phi)) * 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walk = if dev.phase_noise_std_rad > 0.0 {
        Some(
            Normal::new(0.0, dev.phase_noise_std_rad)
                .map_err(|e| Error::Config(format!("phase noise: {e}")))?,
        )
    } else {
        None
    };

    let mut pn_phase = 0.0;
    let mut out = Vec::with_capacity(frame.len());
    for (n, &x) in frame.samples.iter().enumerate() {
        let iq = mu * x + nu * x.conj() + dev.dc_offset;
        let env = iq.norm_sqr();
        let mut pa = Complex64::new(0.0, 0.0);
        let mut env_pow = 1.0;
        for c in &dev.pa_coeffs {
            pa += c * env_pow;
            env_pow *= env;
        }
        let mut y = iq * pa;
        if let Some(walk) = &walk {
            pn_phase += walk.sample(&mut rng);
            y *= Complex64::from_polar(1.0, pn_phase);
        }
        if dev.cfo_hz != 0.0 {
            y *= Complex64::from_polar(1.0, 2.0 * PI * dev.cfo_hz * n as f64 * ts);
        }
        if !y.is_finite() {
            return Err(Error::Impairment(format!(
                "{}: sample {n} diverged",
                dev.device_id
            )));
        }
        out.push(y);
    }
    Ok(frame
        .derive(out)
        .with_meta("device_id", &dev.device_id)
        .with_meta("impairment_seed", seed))
}

/// Uniform draw window `center +- spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub center: f64,
    pub spread: f64,
}

impl Spread {
    pub const fn new(center: f64, spread: f64) -> Self {
        Self { center, spread }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.spread == 0.0 {
            self.center
        } else {
            self.center + self.spread * rng.random_range(-1.0..=1.0)
        }
    }
}

/// Parameter distribution for one transmitter model ("manufacturer").
///
/// Complex-valued quantities (DC offset, PA coefficients) draw their
/// magnitude from the spread and take a uniform random phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManufacturerCluster {
    pub name: String,
    pub cfo_hz: Spread,
    pub iq_gain_imbalance: Spread,
    pub iq_phase_imbalance_rad: Spread,
    pub dc_offset_mag: Spread,
    pub pa3_mag: Spread,
    pub pa5_mag: Spread,
    pub phase_noise_std_rad: Spread,
}

impl ManufacturerCluster {
    /// Four transmitter models with distinct impairment centers.
    pub fn defaults() -> Vec<ManufacturerCluster> {
        let cluster = |name: &str, gain: f64, phase: f64, dc: f64, pa3: f64, pn: f64| {
            ManufacturerCluster {
                name: name.to_string(),
                cfo_hz: Spread::new(0.0, 300.0),
                iq_gain_imbalance: Spread::new(gain, 0.08),
                iq_phase_imbalance_rad: Spread::new(phase, 0.08),
                dc_offset_mag: Spread::new(dc, 0.04),
                pa3_mag: Spread::new(pa3, 0.06),
                pa5_mag: Spread::new(0.01, 0.01),
                phase_noise_std_rad: Spread::new(pn, 0.5 * pn),
            }
        };
        vec![
            cluster("model-a", 1.0, 0.0, 0.05, 0.08, 2e-3),
            cluster("model-b", 1.05, 0.05, 0.08, 0.12, 3e-3),
            cluster("model-c", 0.95, -0.05, 0.04, 0.05, 1.5e-3),
            cluster("model-d", 1.1, 0.1, 0.10, 0.15, 4e-3),
        ]
    }

    pub fn sample<R: Rng>(&self, device_id: impl Into<String>, rng: &mut R) -> DeviceProfile {
        let polar = |mag: &Spread, rng: &mut R| {
            let m = mag.draw(rng).abs();
            Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI))
        };
        let dc_offset = polar(&self.dc_offset_mag, rng);
        let pa3 = -polar(&self.pa3_mag, rng);
        let pa5 = polar(&self.pa5_mag, rng);
        DeviceProfile {
            device_id: device_id.into(),
            cfo_hz: self.cfo_hz.draw(rng),
            iq_gain_imbalance: self.iq_gain_imbalance.draw(rng).max(0.5),
            iq_phase_imbalance_rad: self.iq_phase_imbalance_rad.draw(rng),
            dc_offset,
            pa_coeffs: vec![Complex64::new(1.0, 0.0), pa3, pa5],
            phase_noise_std_rad: self.phase_noise_std_rad.draw(rng).max(0.0),
        }
    }
}

/// Draws `count` profiles from `cluster`; ids are `"{prefix}{first_index + i}"`.
pub fn sample_profiles(
    cluster: &ManufacturerCluster,
    prefix: &str,
    first_index: usize,
    count: usize,
    seed: u64,
) -> Vec<DeviceProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| cluster.sample(format!("{prefix}{:03}", first_index + i), &mut rng))
        .collect()
}
