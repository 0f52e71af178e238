//! Receiver preprocessing: packet synchronization, preamble extraction,
//! CFO estimation and compensation, RMS normalization.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_phy::{make_upchirp, IqFrame, LoraConfig};

/// Default normalized-correlation threshold for packet detection.
pub const DEFAULT_SYNC_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sync_threshold: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sync_threshold: DEFAULT_SYNC_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub start_index: usize,
    /// Normalized correlation at `start_index`, in `[0, 1]`.
    pub correlation_peak: f64,
    pub cfo_estimate_hz: f64,
}

/// Locates the preamble in `rx` with the default threshold.
pub fn synchronize(rx: &IqFrame, cfg: &LoraConfig) -> Result<SyncResult> {
    synchronize_with(rx, cfg, &FrontendConfig::default())
}

/// Locates the preamble by normalized correlation against the clean
/// up-chirp.
///
/// Each symbol-length block is correlated coherently and the block
/// magnitudes are summed, so a residual CFO that rotates the phase across
/// the preamble does not cancel the peak. The score is divided by the
/// window and template energies, which bounds it by 1 (Cauchy-Schwarz).
pub fn synchronize_with(rx: &IqFrame, cfg: &LoraConfig, fe: &FrontendConfig) -> Result<SyncResult> {
    rx.check()?;
    let chirp = make_upchirp(cfg)?;
    let l = chirp.len();
    let n_sym = cfg.n_preamble_symbols;
    let p = cfg.preamble_len();
    if rx.len() < p {
        return Err(Error::Truncated {
            needed: p,
            available: rx.len(),
        });
    }

    let block_corr = correlate(&rx.samples, &chirp.samples);
    let mut energy_prefix = Vec::with_capacity(rx.len() + 1);
    energy_prefix.push(0.0);
    let mut acc = 0.0;
    for s in &rx.samples {
        acc += s.norm_sqr();
        energy_prefix.push(acc);
    }
    let template_energy = chirp.power() * l as f64 * n_sym as f64;

    let mut best = (0usize, -1.0f64);
    for d in 0..=rx.len() - p {
        let window_energy = energy_prefix[d + p] - energy_prefix[d];
        if window_energy <= 0.0 {
            continue;
        }
        let num: f64 = (0..n_sym).map(|i| block_corr[d + i * l].norm()).sum();
        let score = num / (window_energy * template_energy).sqrt();
        if score > best.1 {
            best = (d, score);
        }
    }
    let (start_index, peak) = (best.0, best.1.clamp(0.0, 1.0));
    if peak < fe.sync_threshold {
        return Err(Error::NoPacket {
            peak,
            threshold: fe.sync_threshold,
        });
    }
    let cfo_estimate_hz = if n_sym >= 2 {
        let pre = extract_window(rx, start_index, p)?;
        estimate_cfo(&pre, cfg)?
    } else {
        0.0
    };
    Ok(SyncResult {
        start_index,
        correlation_peak: peak,
        cfo_estimate_hz,
    })
}

/// `c[d] = sum_n x[d + n] conj(t[n])` for every `d` with `d + len(t) <= len(x)`.
fn correlate(x: &[Complex64], t: &[Complex64]) -> Vec<Complex64> {
    let n_out = x.len() + 1 - t.len();
    let size = (x.len() + t.len()).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut xa = vec![Complex64::new(0.0, 0.0); size];
    xa[..x.len()].copy_from_slice(x);
    let mut ta = vec![Complex64::new(0.0, 0.0); size];
    ta[..t.len()].copy_from_slice(t);
    fwd.process(&mut xa);
    fwd.process(&mut ta);
    for (a, b) in xa.iter_mut().zip(&ta) {
        *a *= b.conj();
    }
    inv.process(&mut xa);
    let scale = 1.0 / size as f64;
    xa.truncate(n_out);
    xa.iter_mut().for_each(|v| *v *= scale);
    xa
}

fn extract_window(rx: &IqFrame, start: usize, len: usize) -> Result<IqFrame> {
    if start + len > rx.len() {
        return Err(Error::Truncated {
            needed: start + len,
            available: rx.len(),
        });
    }
    Ok(rx.derive(rx.samples[start..start + len].to_vec()))
}

/// Exactly one preamble's worth of samples starting at the sync point.
pub fn extract_preamble(rx: &IqFrame, sync: &SyncResult, cfg: &LoraConfig) -> Result<IqFrame> {
    cfg.validate()?;
    Ok(extract_window(rx, sync.start_index, cfg.preamble_len())?.with_meta("stage", "preamble"))
}

/// Symbol-period autocorrelation CFO estimate,
/// `angle(sum pre[n+L] conj(pre[n])) / (2 pi L Ts)`.
///
/// Unambiguous for `|cfo| < fs / (2L)`.
pub fn estimate_cfo(pre: &IqFrame, cfg: &LoraConfig) -> Result<f64> {
    let l = cfg.samples_per_symbol();
    if pre.len() < 2 * l {
        return Err(Error::Contract(format!(
            "CFO estimation needs two symbols ({} samples), got {}",
            2 * l,
            pre.len()
        )));
    }
    let acc: Complex64 = pre.samples[l..]
        .iter()
        .zip(&pre.samples)
        .map(|(late, early)| late * early.conj())
        .sum();
    if acc.norm() == 0.0 {
        return Err(Error::Contract("CFO estimate on a zero-power frame".into()));
    }
    Ok(acc.arg() * pre.sample_rate_hz / (2.0 * PI * l as f64))
}

/// Multiplies sample `n` by `exp(-j 2 pi cfo n Ts)`.
pub fn compensate_cfo(pre: &IqFrame, cfo_hz: f64) -> IqFrame {
    if cfo_hz == 0.0 {
        return pre.clone();
    }
    let w = -2.0 * PI * cfo_hz / pre.sample_rate_hz;
    let out = pre
        .samples
        .iter()
        .enumerate()
        .map(|(n, s)| s * Complex64::from_polar(1.0, w * n as f64))
        .collect();
    pre.derive(out)
}

/// Scales the frame to unit RMS.
pub fn normalize(pre: &IqFrame) -> Result<IqFrame> {
    let rms = pre.rms();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::Contract("cannot normalize a zero-power frame".into()));
    }
    Ok(pre.derive(pre.samples.iter().map(|s| s / rms).collect()))
}

/// Full front end. The returned frame is the normalized preamble `s[n]`;
/// the CFO left after compensation is recorded under `residual_cfo_hz`.
pub fn preprocess(rx: &IqFrame, cfg: &LoraConfig, fe: &FrontendConfig) -> Result<(IqFrame, SyncResult)> {
    let sync = synchronize_with(rx, cfg, fe)?;
    let pre = extract_preamble(rx, &sync, cfg)?;
    let compensated = compensate_cfo(&pre, sync.cfo_estimate_hz);
    let residual = if cfg.n_preamble_symbols >= 2 {
        estimate_cfo(&compensated, cfg)?
    } else {
        0.0
    };
    let out = normalize(&compensated)?
        .with_meta("cfo_estimate_hz", format!("{:.6}", sync.cfo_estimate_hz))
        .with_meta("residual_cfo_hz", format!("{residual:.6e}"))
        .with_meta("sync_start", sync.start_index)
        .with_meta("stage", "preprocessed");
    Ok((out, sync))
}
