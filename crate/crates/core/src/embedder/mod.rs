//! RFF extractor: a residual CNN trained with triplet loss that maps a
//! feature map to a unit-norm embedding.

mod conv;
mod io;
mod network;
mod train;

pub use conv::Conv2d;
pub use io::{parse_weight_file, read_weights, weight_file_bytes, write_weights, WeightFile, WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION};
pub use network::{EmbedderConfig, EmbedderWeights, ResidualBlock, NORM_FLOOR};
pub use train::{train, train_invocations, EpochRecord, TrainConfig, TrainOutcome, TrainSample};

use serde::{Deserialize, Serialize};

use crate::features::{feature_map, FeatureConfig};
use crate::frontend::{preprocess, FrontendConfig};
use crate::lora_phy::{IqFrame, LoraConfig};
use crate::{Error, Result};

/// Unit-norm fingerprint embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffVector(pub Vec<f32>);

impl RffVector {
    pub(crate) fn from_f64(v: &[f64]) -> Self {
        Self(v.iter().map(|&x| x as f32).collect())
    }

    /// Validates length and unit norm.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let v = Self(values);
        let n = v.norm();
        if v.0.is_empty() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("RffVector must be unit norm, got {n}")));
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| x as f64).collect()
    }

    /// Euclidean distance, accumulated in f64.
    pub fn distance(&self, other: &RffVector) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn dist64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(D(a, p) - D(a, n) + alpha, 0)` with Euclidean `D`.
pub fn triplet_loss(anc: &RffVector, pos: &RffVector, neg: &RffVector, alpha: f64) -> f64 {
    (anc.distance(pos) - anc.distance(neg) + alpha).max(0.0)
}

/// [`triplet_loss`] on raw f64 points, which need not be unit-norm.
pub fn triplet_loss_f64(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> f64 {
    (dist64(a, p) - dist64(a, n) + alpha).max(0.0)
}

/// Indices into a batch of inputs: anchor, positive, negative.
pub type Triplet = (usize, usize, usize);

/// Mean triplet loss over `triplets` and its exact gradient with respect to
/// every weight tensor. `inputs` are raw feature maps.
pub fn loss_and_gradient(
    w: &EmbedderWeights,
    inputs: &[ndarray::Array2<f64>],
    triplets: &[Triplet],
) -> Result<(f64, EmbedderWeights)> {
    let prepared = inputs.iter().map(|x| w.prepare_input(x)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = prepared.iter().map(|v| v.as_slice()).collect();
    batch_gradient(w, &refs, triplets)
}

pub(crate) fn batch_gradient(
    w: &EmbedderWeights,
    inputs: &[&[f64]],
    triplets: &[Triplet],
) -> Result<(f64, EmbedderWeights)> {
    let mut grad = w.zeros_like();
    if triplets.is_empty() {
        return Ok((0.0, grad));
    }
    let mut used = vec![false; inputs.len()];
    for &(a, p, n) in triplets {
        for i in [a, p, n] {
            if i >= inputs.len() {
                return Err(Error::Contract(format!("triplet index {i} out of range")));
            }
            used[i] = true;
        }
    }
    let traces: Vec<Option<network::Trace>> = inputs
        .iter()
        .zip(&used)
        .map(|(x, &u)| u.then(|| w.forward_trace(x)))
        .collect();
    let emb = |i: usize| traces[i].as_ref().map(|t| t.embedding.as_slice()).unwrap_or(&[]);
    let dim = w.embedding_dim();
    let scale = 1.0 / triplets.len() as f64;
    let alpha = w.config.margin_alpha;
    let mut d_emb: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let mut loss = 0.0;
    for &(a, p, n) in triplets {
        let (ea, ep, en) = (emb(a), emb(p), emb(n));
        let dap = dist64(ea, ep);
        let dan = dist64(ea, en);
        let l = dap - dan + alpha;
        if l <= 0.0 {
            continue;
        }
        loss += l * scale;
        let mut acc = |i: usize, v: &[f64], s: f64| {
            let slot = d_emb[i].get_or_insert_with(|| vec![0.0; dim]);
            for (d, x) in slot.iter_mut().zip(v) {
                *d += s * x;
            }
        };
        if dap > 0.0 {
            let u: Vec<f64> = ea.iter().zip(ep).map(|(x, y)| (x - y) / dap).collect();
            acc(a, &u, scale);
            acc(p, &u, -scale);
        }
        if dan > 0.0 {
            let u: Vec<f64> = ea.iter().zip(en).map(|(x, y)| (x - y) / dan).collect();
            acc(a, &u, -scale);
            acc(n, &u, scale);
        }
    }
    for (i, d) in d_emb.iter().enumerate() {
        if let (Some(d), Some(t)) = (d, &traces[i]) {
            w.backward(t, d, &mut grad);
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        let bad: Vec<String> = grad
            .layout()
            .into_iter()
            .zip(grad.tensors())
            .filter(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|((name, _), _)| name)
            .collect();
        return Err(Error::Numerical(format!(
            "non-finite loss ({loss}) or gradient in tensors {bad:?}"
        )));
    }
    Ok((loss, grad))
}

/// Receiver chain configuration used by [`extract`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub lora: LoraConfig,
    pub frontend: FrontendConfig,
    pub features: FeatureConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.lora.validate()?;
        self.features.stft.validate()
    }

    /// Shape of the feature map this pipeline produces.
    pub fn feature_shape(&self) -> (usize, usize) {
        self.features.output_shape(self.lora.preamble_len())
    }

    /// Received packet to feature map.
    pub fn featurize(&self, rx: &IqFrame) -> Result<ndarray::Array2<f64>> {
        let (pre, _) = preprocess(rx, &self.lora, &self.frontend)?;
        feature_map(&pre, &self.features)
    }
}

/// Preprocess, featurize and embed each frame. Failures are reported per
/// frame.
pub fn extract(frames: &[IqFrame], w: &EmbedderWeights, cfg: &PipelineConfig) -> Vec<Result<RffVector>> {
    frames
        .iter()
        .map(|f| cfg.featurize(f).and_then(|x| w.forward(&x)))
        .collect()
}
