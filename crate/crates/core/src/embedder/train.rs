use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, info};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{EmbedderConfig, EmbedderWeights};
use super::{batch_gradient, triplet_loss_f64, Triplet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_patience_epochs: usize,
    pub stop_patience_epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Hard cap on epochs; `None` runs until early stopping.
    pub max_epochs: Option<usize>,
    /// Pick the closest negative farther than the positive instead of a
    /// random one.
    pub semi_hard_mining: bool,
    /// Decay of the running squared-gradient average.
    pub rms_decay: f64,
    pub rms_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_drop_factor: 0.2,
            lr_patience_epochs: 10,
            stop_patience_epochs: 30,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 0,
            max_epochs: None,
            semi_hard_mining: false,
            rms_decay: 0.9,
            rms_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("initial_lr must be > 0");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("lr_drop_factor must be in (0, 1)");
        }
        if self.lr_patience_epochs == 0 || self.stop_patience_epochs == 0 {
            return bad("patience values must be positive");
        }
        if self.batch_size < 3 {
            return bad("batch_size must be >= 3");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        if self.max_epochs == Some(0) {
            return bad("max_epochs must be positive");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) || !(self.rms_eps > 0.0) {
            return bad("rms_decay must be in (0, 1) and rms_eps > 0");
        }
        Ok(())
    }
}

/// One labelled training input.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Array2<f64>,
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: EmbedderWeights,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

static TRAIN_INVOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of times [`train`] has been entered in this process.
pub fn train_invocations() -> usize {
    TRAIN_INVOCATIONS.load(Ordering::SeqCst)
}

/// Trains an extractor with RMSprop on within-batch triplets.
pub fn train(data: &[TrainSample], cfg: &TrainConfig, ecfg: &EmbedderConfig) -> Result<TrainOutcome> {
    TRAIN_INVOCATIONS.fetch_add(1, Ordering::SeqCst);
    cfg.validate()?;
    ecfg.validate()?;
    let mut by_device: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        if s.features.dim() != ecfg.input_shape {
            return Err(Error::Contract(format!(
                "sample {i} has shape {:?}, extractor expects {:?}",
                s.features.dim(),
                ecfg.input_shape
            )));
        }
        by_device.entry(s.device_id.as_str()).or_default().push(i);
    }
    if by_device.len() < 2 {
        return Err(Error::Contract("training needs at least two devices".into()));
    }
    if let Some((id, _)) = by_device.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Contract(format!("device {id:?} has fewer than two samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = EmbedderWeights::init(ecfg, rng.random())?;
    let inputs: Vec<Vec<f64>> = data
        .iter()
        .map(|s| w.prepare_input(&s.features))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = {
        let ids: BTreeMap<&str, usize> = by_device.keys().enumerate().map(|(i, k)| (*k, i)).collect();
        data.iter().map(|s| ids[s.device_id.as_str()]).collect()
    };

    // Stratified split; every device keeps at least two training samples.
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for idx in by_device.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let mut n_val = (idx.len() as f64 * cfg.val_fraction).round() as usize;
        if n_val == 1 {
            // A lone validation sample cannot anchor a triplet.
            n_val = 2;
        }
        let n_val = n_val.min(idx.len() - 2);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    let val_triplets = validation_triplets(&val_idx, &labels, &mut rng);
    if val_triplets.is_empty() {
        return Err(Error::Contract(
            "validation split yields no triplets; add samples or raise val_fraction".into(),
        ));
    }
    info!(
        "training on {} samples ({} devices), {} validation triplets, {} parameters",
        train_idx.len(),
        by_device.len(),
        val_triplets.len(),
        w.n_params()
    );

    let mut sq_avg = w.zeros_like();
    let mut lr = cfg.initial_lr;
    let mut best = (f64::INFINITY, w.clone(), 0usize);
    let mut history = Vec::new();
    let (mut lr_wait, mut stop_wait) = (0, 0);
    let mut epoch = 0;
    loop {
        epoch += 1;
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            let batch_inputs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let triplets = if cfg.semi_hard_mining {
                semi_hard_triplets(&w, &batch_inputs, &batch_labels, &mut rng)
            } else {
                random_triplets(&batch_labels, &mut rng)
            };
            if triplets.is_empty() {
                continue;
            }
            let (loss, grad) = batch_gradient(&w, &batch_inputs, &triplets)
                .map_err(|e| Error::Training(format!("epoch {epoch}, step {steps}: {e}")))?;
            rmsprop_step(&mut w, &mut sq_avg, &grad, lr, cfg);
            loss_sum += loss;
            steps += 1;
        }
        let train_loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
        let val_loss = validation_loss(&w, &inputs, &val_triplets);
        if !train_loss.is_finite() || !val_loss.is_finite() || !w.is_finite() {
            return Err(Error::Training(format!(
                "epoch {epoch}: train loss {train_loss}, validation loss {val_loss}, lr {lr:e}; weights finite: {}",
                w.is_finite()
            )));
        }
        if val_loss < best.0 {
            best = (val_loss, w.clone(), epoch);
            lr_wait = 0;
            stop_wait = 0;
        } else {
            lr_wait += 1;
            stop_wait += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_val_loss: best.0,
            lr,
        });
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e}");
        if stop_wait >= cfg.stop_patience_epochs || cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break;
        }
        if lr_wait >= cfg.lr_patience_epochs {
            lr *= cfg.lr_drop_factor;
            lr_wait = 0;
            info!("epoch {epoch}: learning rate reduced to {lr:e}");
        }
    }
    let (best_val, mut weights, best_epoch) = best;
    weights.quantize_f32();
    info!("best validation loss {best_val:.5} at epoch {best_epoch} of {epoch}");
    Ok(TrainOutcome {
        weights,
        history,
        best_epoch,
    })
}

fn rmsprop_step(w: &mut EmbedderWeights, sq: &mut EmbedderWeights, g: &EmbedderWeights, lr: f64, cfg: &TrainConfig) {
    let rho = cfg.rms_decay;
    for ((wt, st), gt) in w.tensors_mut().into_iter().zip(sq.tensors_mut()).zip(g.tensors()) {
        for ((wv, sv), gv) in wt.iter_mut().zip(st.iter_mut()).zip(gt) {
            *sv = rho * *sv + (1.0 - rho) * gv * gv;
            *wv -= lr * gv / (sv.sqrt() + cfg.rms_eps);
        }
    }
}

/// Groups batch positions by label, in label order.
fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(pos);
    }
    g
}

/// One triplet per device with at least two members in the batch: random
/// anchor and positive, random negative from any other device.
fn random_triplets<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (label, members) in groups(labels) {
        if members.len() < 2 {
            continue;
        }
        let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != label).collect();
        let Some(&n) = others.choose(rng) else {
            continue;
        };
        let pair: Vec<&usize> = members.choose_multiple(rng, 2).collect();
        out.push((*pair[0], *pair[1], n));
    }
    out
}

/// Like [`random_triplets`] but the negative is the closest one that is
/// still farther from the anchor than the positive, falling back to the
/// hardest negative.
fn semi_hard_triplets<R: Rng>(w: &EmbedderWeights, inputs: &[&[f64]], labels: &[usize], rng: &mut R) -> Vec<Triplet> {
    let emb: Vec<Vec<f64>> = inputs.iter().map(|x| w.forward_trace(x).embedding).collect();
    let d = |i: usize, j: usize| emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for (label, members) in groups(labels) {
        if members.len() < 2 {
            continue;
        }
        let pair: Vec<&usize> = members.choose_multiple(rng, 2).collect();
        let (a, p) = (*pair[0], *pair[1]);
        let dap = d(a, p);
        let others = (0..labels.len()).filter(|&i| labels[i] != label);
        let semi = others
            .clone()
            .filter(|&n| d(a, n) > dap)
            .min_by(|&x, &y| d(a, x).total_cmp(&d(a, y)));
        let hardest = others.min_by(|&x, &y| d(a, x).total_cmp(&d(a, y)));
        if let Some(n) = semi.or(hardest) {
            out.push((a, p, n));
        }
    }
    out
}

/// Fixed validation triplets: every validation sample with a same-device
/// partner anchors one triplet.
fn validation_triplets<R: Rng>(val: &[usize], labels: &[usize], rng: &mut R) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &a in val {
        let pos: Vec<usize> = val.iter().copied().filter(|&i| i != a && labels[i] == labels[a]).collect();
        let neg: Vec<usize> = val.iter().copied().filter(|&i| labels[i] != labels[a]).collect();
        if let (Some(&p), Some(&n)) = (pos.choose(rng), neg.choose(rng)) {
            out.push((a, p, n));
        }
    }
    out
}

fn validation_loss(w: &EmbedderWeights, inputs: &[Vec<f64>], triplets: &[Triplet]) -> f64 {
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(a, p, n) in triplets {
        for i in [a, p, n] {
            cache.entry(i).or_insert_with(|| w.forward_trace(&inputs[i]).embedding);
        }
    }
    let alpha = w.config.margin_alpha;
    triplets
        .iter()
        .map(|(a, p, n)| triplet_loss_f64(&cache[a], &cache[p], &cache[n], alpha))
        .sum::<f64>()
        / triplets.len() as f64
}
