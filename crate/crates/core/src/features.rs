//! Time-frequency features: STFT, dB spectrogram and the
//! channel-independent spectrogram.
//!
//! Splitting the preamble into `M` overlapping segments, each STFT column is
//! approximately `H_m ⊙ F(X_m)`: channel response times the device-distorted
//! segment spectrum. When the channel barely changes between neighbouring
//! segments (`H_m ≈ H_{m+1}`), dividing column `m+1` by column `m` removes
//! it, leaving `F(X_{m+1}) / F(X_m)`.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_phy::IqFrame;

/// Floor added to `|S|^2` before taking the log.
pub const DB_FLOOR_EPS: f64 = 1e-12;

/// Denominator magnitudes are floored at this fraction of the column peak.
pub const DIVISION_FLOOR_REL: f64 = 1e-6;

pub const DEFAULT_CLIP_DB: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 256,
            hop: 128,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "STFT needs 0 < hop ({}) <= n_fft ({})",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of STFT columns for a frame of `len` samples.
    pub fn n_columns(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }
}

/// Complex STFT, shape `(n_fft, M)`.
///
/// Column `m` is the DFT of `s[mR .. mR + N] * w`. Rows are in centered
/// order: row `r` holds frequency bin `r - N/2`, so row `N/2` is DC.
pub fn stft(s: &IqFrame, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    let n = cfg.n_fft;
    if s.len() < n {
        return Err(Error::Contract(format!(
            "STFT of {} samples needs at least n_fft = {n}",
            s.len()
        )));
    }
    let m = cfg.n_columns(s.len());
    let window = cfg.window.coefficients(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = Array2::zeros((n, m));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for col in 0..m {
        let start = col * cfg.hop;
        for (b, (x, w)) in buf.iter_mut().zip(s.samples[start..start + n].iter().zip(&window)) {
            *b = x * w;
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate() {
            out[[(k + half) % n, col]] = *v;
        }
    }
    Ok(out)
}

/// `10 log10(|S|^2)` spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values_db: Array2<f64>,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.values_db.nrows()
    }

    pub fn time_cols(&self) -> usize {
        self.values_db.ncols()
    }
}

pub fn spectrogram_db(s: &Array2<Complex64>) -> Spectrogram {
    Spectrogram {
        values_db: s.mapv(|v| 10.0 * (v.norm_sqr() + DB_FLOOR_EPS).log10()),
    }
}

/// Adjacent-column ratio spectrogram in dB, shape `(N, M - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannIndSpectrogram {
    pub values_db: Array2<f64>,
}

impl ChannIndSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        self.values_db.dim()
    }
}

/// Complex ratio `Q[:, m] = S[:, m+1] / S[:, m]` with the denominator
/// magnitude floored at [`DIVISION_FLOOR_REL`] times the column's peak.
pub fn column_ratios(s: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (rows, cols) = s.dim();
    if cols < 2 {
        return Err(Error::Contract(format!(
            "channel-independent spectrogram needs at least 2 STFT columns, got {cols}"
        )));
    }
    let mut q = Array2::zeros((rows, cols - 1));
    for m in 0..cols - 1 {
        let denom = s.column(m);
        let peak = denom.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let floor = DIVISION_FLOOR_REL * peak;
        for r in 0..rows {
            let d = denom[r];
            let mag = d.norm();
            let d = if mag >= floor && mag > 0.0 {
                d
            } else if mag > 0.0 {
                d * (floor / mag)
            } else {
                Complex64::new(floor.max(f64::MIN_POSITIVE), 0.0)
            };
            q[[r, m]] = s[[r, m + 1]] / d;
        }
    }
    Ok(q)
}

/// `10 log10(|Q|^2)` clipped to `[-clip_db, clip_db]`.
pub fn channel_independent(s: &Array2<Complex64>, clip_db: f64) -> Result<ChannIndSpectrogram> {
    if !(clip_db > 0.0) {
        return Err(Error::Config(format!("clip level {clip_db} dB must be positive")));
    }
    let q = column_ratios(s)?;
    Ok(ChannIndSpectrogram {
        values_db: q.mapv(|v| (10.0 * v.norm_sqr().log10()).clamp(-clip_db, clip_db)),
    })
}

/// Composition `channel_independent(stft(pre))`.
pub fn featurize(pre: &IqFrame, cfg: &StftConfig, clip_db: f64) -> Result<ChannIndSpectrogram> {
    channel_independent(&stft(pre, cfg)?, clip_db)
}

/// Which time-frequency representation feeds the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    ChannelIndependent,
    /// Plain dB spectrogram, the channel-sensitive baseline.
    Spectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub clip_db: f64,
    pub kind: FeatureKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            clip_db: DEFAULT_CLIP_DB,
            kind: FeatureKind::ChannelIndependent,
        }
    }
}

impl FeatureConfig {
    /// Feature map shape for a preamble of `len` samples.
    pub fn output_shape(&self, len: usize) -> (usize, usize) {
        let m = self.stft.n_columns(len);
        match self.kind {
            FeatureKind::ChannelIndependent => (self.stft.n_fft, m.saturating_sub(1)),
            FeatureKind::Spectrogram => (self.stft.n_fft, m),
        }
    }
}

/// Real-valued model input for the configured representation.
pub fn feature_map(pre: &IqFrame, fc: &FeatureConfig) -> Result<Array2<f64>> {
    let s = stft(pre, &fc.stft)?;
    Ok(match fc.kind {
        FeatureKind::ChannelIndependent => channel_independent(&s, fc.clip_db)?.values_db,
        FeatureKind::Spectrogram => spectrogram_db(&s).values_db,
    })
}
