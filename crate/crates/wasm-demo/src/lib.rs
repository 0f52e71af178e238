//! Browser bindings for three demo operations:
//!
//! * `simulate`: one device's preamble through a fading channel, shown as
//!   plain and channel-independent spectrograms before and after the channel;
//! * `power_delay_profile`: tap powers for an RMS delay spread;
//! * `roc_json`: empirical ROC and AUC for pasted rogue scores.
//!
//! The plain Rust functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use ndarray::Array2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use rffi_core::channel::{exponential_pdp, transmit, ChannelSpec};
use rffi_core::features::{channel_independent, spectrogram_db, stft, StftConfig, DEFAULT_CLIP_DB};
use rffi_core::frontend::{preprocess, FrontendConfig};
use rffi_core::identifier::{auc, roc_curve, RocPoint};
use rffi_core::lora_phy::{apply_impairments, make_preamble, sample_profiles, LoraConfig, ManufacturerCluster};
use rffi_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Index into the built-in manufacturer clusters.
    pub cluster: usize,
    pub device_seed: u64,
    pub tau_ns: f64,
    pub doppler_hz: f64,
    pub rician_k: f64,
    pub snr_db: f64,
    pub channel_seed: u64,
}

/// Row-major maps, all `rows x cols` except the channel-independent ones
/// which have one column fewer.
#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub rows: usize,
    pub cols: usize,
    pub clean_plain: Vec<f32>,
    pub received_plain: Vec<f32>,
    pub clean_ind: Vec<f32>,
    pub received_ind: Vec<f32>,
    pub mad_plain_db: f64,
    pub mad_ind_db: f64,
    pub device_cfo_hz: f64,
    pub estimated_cfo_hz: f64,
}

fn flat(a: &Array2<f64>) -> Vec<f32> {
    a.iter().map(|&v| v as f32).collect()
}

fn mad(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn simulate_native(p: &SimParams) -> Result<Fingerprint> {
    let clusters = ManufacturerCluster::defaults();
    let cluster = clusters
        .get(p.cluster)
        .ok_or_else(|| Error::Config(format!("cluster index {} out of range", p.cluster)))?;
    let profile = sample_profiles(cluster, "demo", 1, 1, p.device_seed).remove(0);
    let lora = LoraConfig::default();
    let tx = apply_impairments(&make_preamble(&lora)?, &profile, p.device_seed)?;
    let spec = ChannelSpec {
        rms_delay_spread_s: p.tau_ns * 1e-9,
        max_doppler_hz: p.doppler_hz,
        rician_k: p.rician_k,
        snr_db: p.snr_db,
        max_path_index: None,
        seed: p.channel_seed,
    };
    let rx = transmit(&tx, &spec)?;
    let fe = FrontendConfig::default();
    let (clean, _) = preprocess(&tx, &lora, &fe)?;
    let (received, sync) = preprocess(&rx, &lora, &fe)?;

    let cfg = StftConfig::default();
    let s_clean = stft(&clean, &cfg)?;
    let s_rx = stft(&received, &cfg)?;
    let (p_clean, p_rx) = (spectrogram_db(&s_clean).values_db, spectrogram_db(&s_rx).values_db);
    let q_clean = channel_independent(&s_clean, DEFAULT_CLIP_DB)?.values_db;
    let q_rx = channel_independent(&s_rx, DEFAULT_CLIP_DB)?.values_db;
    Ok(Fingerprint {
        rows: p_clean.nrows(),
        cols: p_clean.ncols(),
        mad_plain_db: mad(&p_clean, &p_rx),
        mad_ind_db: mad(&q_clean, &q_rx),
        clean_plain: flat(&p_clean),
        received_plain: flat(&p_rx),
        clean_ind: flat(&q_clean),
        received_ind: flat(&q_rx),
        device_cfo_hz: profile.cfo_hz,
        estimated_cfo_hz: sync.cfo_estimate_hz,
    })
}

/// Tap powers of the exponential profile at 1 MHz sampling.
pub fn pdp_native(tau_ns: f64) -> Result<Vec<f64>> {
    let spec = ChannelSpec {
        rms_delay_spread_s: tau_ns * 1e-9,
        ..ChannelSpec::identity()
    };
    exponential_pdp(&spec, 1.0 / LoraConfig::default().sample_rate_hz)
}

/// Numbers separated by commas, whitespace or semicolons.
pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("not a finite number: {t:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RocSummary {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

pub fn roc_native(legit: &str, rogue: &str) -> Result<RocSummary> {
    let (l, r) = (parse_scores(legit)?, parse_scores(rogue)?);
    if l.is_empty() || r.is_empty() {
        return Err(Error::Config("both score lists need at least one value".into()));
    }
    let points = roc_curve(&l, &r);
    Ok(RocSummary {
        auc: auc(&points),
        points,
    })
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct FingerprintView(Fingerprint);

#[wasm_bindgen]
impl FingerprintView {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.0.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.0.cols
    }
    pub fn clean_plain(&self) -> Vec<f32> {
        self.0.clean_plain.clone()
    }
    pub fn received_plain(&self) -> Vec<f32> {
        self.0.received_plain.clone()
    }
    pub fn clean_ind(&self) -> Vec<f32> {
        self.0.clean_ind.clone()
    }
    pub fn received_ind(&self) -> Vec<f32> {
        self.0.received_ind.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn mad_plain_db(&self) -> f64 {
        self.0.mad_plain_db
    }
    #[wasm_bindgen(getter)]
    pub fn mad_ind_db(&self) -> f64 {
        self.0.mad_ind_db
    }
    #[wasm_bindgen(getter)]
    pub fn device_cfo_hz(&self) -> f64 {
        self.0.device_cfo_hz
    }
    #[wasm_bindgen(getter)]
    pub fn estimated_cfo_hz(&self) -> f64 {
        self.0.estimated_cfo_hz
    }
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn simulate(
    cluster: usize,
    device_seed: u32,
    tau_ns: f64,
    doppler_hz: f64,
    rician_k: f64,
    snr_db: f64,
    channel_seed: u32,
) -> std::result::Result<FingerprintView, JsError> {
    simulate_native(&SimParams {
        cluster,
        device_seed: device_seed as u64,
        tau_ns,
        doppler_hz,
        rician_k,
        snr_db,
        channel_seed: channel_seed as u64,
    })
    .map(FingerprintView)
    .map_err(js)
}

#[wasm_bindgen]
pub fn power_delay_profile(tau_ns: f64) -> std::result::Result<Vec<f64>, JsError> {
    pdp_native(tau_ns).map_err(js)
}

/// JSON `{ "auc": .., "points": [{ "fpr", "tpr", "threshold" }, ..] }`.
#[wasm_bindgen]
pub fn roc_json(legit: &str, rogue: &str) -> std::result::Result<String, JsError> {
    let s = roc_native(legit, rogue).map_err(js)?;
    Ok(serde_json::to_string(&s).expect("summary serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SimParams {
        SimParams {
            cluster: 0,
            device_seed: 3,
            tau_ns: 150.0,
            doppler_hz: 0.0,
            rician_k: 0.0,
            snr_db: f64::INFINITY,
            channel_seed: 9,
        }
    }

    #[test]
    fn simulate_shapes_and_cancellation() {
        let f = simulate_native(&params()).unwrap();
        assert_eq!((f.rows, f.cols), (256, 63));
        assert_eq!(f.clean_plain.len(), 256 * 63);
        assert_eq!(f.received_ind.len(), 256 * 62);
        assert!(f.mad_ind_db < f.mad_plain_db);
        assert!((f.estimated_cfo_hz - f.device_cfo_hz).abs() < 50.0);
    }

    #[test]
    fn simulate_rejects_bad_cluster() {
        let p = SimParams { cluster: 99, ..params() };
        assert!(simulate_native(&p).is_err());
    }

    #[test]
    fn pdp_sums_to_one() {
        let p = pdp_native(300.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn roc_hand_case() {
        let s = roc_native("0.1, 0.2", "0.15\n0.3").unwrap();
        assert_eq!(s.auc, 0.75);
        assert!(roc_native("0.1 x", "0.2").is_err());
        assert!(roc_native("", "0.2").is_err());
    }
}
