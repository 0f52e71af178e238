//! In-memory implementations of the CLI subcommands.

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::embedder::{train, EmbedderConfig, PipelineConfig, RffVector, TrainConfig, TrainOutcome, TrainSample, WeightFile};
use crate::identifier::{classify, detect, evaluate, threshold_for_scores, rogue_score, EvalReport};
use crate::registry::Registry;
use crate::{Error, Result};

/// Weight-file metadata key holding the receiver pipeline as JSON.
pub const PIPELINE_META_KEY: &str = "pipeline";

fn check_dataset(ds: &Dataset, pipeline: &PipelineConfig) -> Result<()> {
    if ds.manifest.lora != pipeline.lora {
        return Err(Error::Version(format!(
            "dataset {} was synthesized with a different LoRa configuration than the pipeline",
            ds.manifest.dataset_id
        )));
    }
    Ok(())
}

/// Receiver pipeline a weight file was trained with.
pub fn pipeline_of(wf: &WeightFile) -> Result<PipelineConfig> {
    match wf.metadata.get(PIPELINE_META_KEY) {
        Some(json) => serde_json::from_str(json)
            .map_err(|e| Error::Integrity(format!("weight file pipeline metadata: {e}"))),
        None => Ok(PipelineConfig::default()),
    }
}

/// Refuses to run a weight file under a different front end or feature
/// configuration than it was trained with.
pub fn check_pipeline(wf: &WeightFile, pipeline: &PipelineConfig) -> Result<()> {
    let trained = pipeline_of(wf)?;
    if &trained != pipeline {
        return Err(Error::Version(
            "weight file was trained with a different receiver/feature configuration".into(),
        ));
    }
    if wf.weights.config.input_shape != pipeline.feature_shape() {
        return Err(Error::Version(format!(
            "extractor expects {:?} inputs, pipeline produces {:?}",
            wf.weights.config.input_shape,
            pipeline.feature_shape()
        )));
    }
    Ok(())
}

/// Feature maps of every packet that survives preprocessing, labelled by
/// device.
pub fn training_samples(ds: &Dataset, pipeline: &PipelineConfig) -> Result<Vec<TrainSample>> {
    check_dataset(ds, pipeline)?;
    let mut out = Vec::with_capacity(ds.len());
    let mut failed = 0;
    for (i, e) in ds.manifest.entries.iter().enumerate() {
        match pipeline.featurize(&ds.frame(i)?) {
            Ok(features) => out.push(TrainSample {
                features,
                device_id: e.device_id.clone(),
            }),
            Err(err) => {
                failed += 1;
                warn!("packet {i} ({}) skipped: {err}", e.device_id);
            }
        }
    }
    if failed > 0 {
        warn!("{failed} of {} packets failed preprocessing", ds.len());
    }
    if out.is_empty() {
        return Err(Error::Contract("no packet survived preprocessing".into()));
    }
    Ok(out)
}

pub struct Trained {
    pub weight_file: WeightFile,
    pub outcome: TrainOutcome,
}

/// Trains an extractor on `ds`. The embedder input shape is taken from the
/// pipeline.
pub fn train_on_dataset(
    ds: &Dataset,
    pipeline: &PipelineConfig,
    ecfg: &EmbedderConfig,
    tcfg: &TrainConfig,
) -> Result<Trained> {
    pipeline.validate()?;
    let samples = training_samples(ds, pipeline)?;
    let ecfg = EmbedderConfig {
        input_shape: pipeline.feature_shape(),
        ..ecfg.clone()
    };
    let outcome = train(&samples, tcfg, &ecfg)?;
    let mut wf = WeightFile::new(outcome.weights.clone(), tcfg.seed);
    wf.metadata.insert(
        PIPELINE_META_KEY.into(),
        serde_json::to_string(pipeline).expect("pipeline serializes"),
    );
    wf.metadata.insert("train_dataset".into(), ds.manifest.dataset_id.clone());
    wf.metadata.insert("train_config".into(), serde_json::to_string(tcfg).expect("serializes"));
    wf.metadata.insert("epochs_run".into(), outcome.history.len().to_string());
    wf.metadata.insert("best_epoch".into(), outcome.best_epoch.to_string());
    Ok(Trained {
        weight_file: wf,
        outcome,
    })
}

/// Embedding of one dataset packet.
pub struct Embedded {
    pub index: usize,
    pub device_id: String,
    pub vector: Result<RffVector>,
}

pub fn embed_dataset(ds: &Dataset, wf: &WeightFile, pipeline: &PipelineConfig) -> Result<Vec<Embedded>> {
    check_dataset(ds, pipeline)?;
    check_pipeline(wf, pipeline)?;
    ds.manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let vector = ds
                .frame(i)
                .and_then(|f| pipeline.featurize(&f))
                .and_then(|x| wf.weights.forward(&x));
            Ok(Embedded {
                index: i,
                device_id: e.device_id.clone(),
                vector,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollSummary {
    pub templates: BTreeMap<String, usize>,
    pub held_out: usize,
    pub failed_packets: usize,
    #[serde(with = "crate::util::serde_f64")]
    pub rogue_threshold: f64,
}

/// Enrolls every device of `ds`: the first `templates_per_device`
/// embeddings become templates. With `target_tpr`, the remaining
/// embeddings calibrate the rogue threshold.
#[allow(clippy::too_many_arguments)]
pub fn enroll_dataset(
    reg: &mut Registry,
    ds: &Dataset,
    wf: &WeightFile,
    fingerprint: &str,
    pipeline: &PipelineConfig,
    templates_per_device: usize,
    enrolled_at: u64,
    target_tpr: Option<f64>,
) -> Result<EnrollSummary> {
    if templates_per_device == 0 {
        return Err(Error::Config("templates_per_device must be >= 1".into()));
    }
    let mut per_device: BTreeMap<String, Vec<RffVector>> = BTreeMap::new();
    let mut failed = 0;
    for e in embed_dataset(ds, wf, pipeline)? {
        match e.vector {
            Ok(v) => per_device.entry(e.device_id).or_default().push(v),
            Err(err) => {
                failed += 1;
                warn!("packet {} ({}) not enrolled: {err}", e.index, e.device_id);
            }
        }
    }
    let mut held_out = Vec::new();
    let mut templates = BTreeMap::new();
    for (id, mut vs) in per_device {
        let rest = vs.split_off(templates_per_device.min(vs.len()));
        templates.insert(id.clone(), vs.len());
        reg.enroll(&id, vs, enrolled_at, fingerprint)?;
        held_out.extend(rest);
    }
    if let Some(target) = target_tpr {
        if held_out.is_empty() {
            return Err(Error::Calibration(
                "no held-out packets beyond the enrollment templates to calibrate with".into(),
            ));
        }
        let scores = held_out.iter().map(|v| rogue_score(reg, v)).collect::<Result<Vec<_>>>()?;
        let lambda = threshold_for_scores(&scores, target)?;
        reg.set_threshold(lambda)?;
        info!("rogue threshold calibrated to {lambda:.5} for TPR {target}");
    }
    Ok(EnrollSummary {
        templates,
        held_out: held_out.len(),
        failed_packets: failed,
        rogue_threshold: reg.rogue_threshold,
    })
}

/// Per-packet identification outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub index: usize,
    pub true_device_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_legitimate: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn identify_dataset(
    reg: &Registry,
    ds: &Dataset,
    wf: &WeightFile,
    pipeline: &PipelineConfig,
) -> Result<Vec<Decision>> {
    Ok(embed_dataset(ds, wf, pipeline)?
        .into_iter()
        .map(|e| {
            let mut d = Decision {
                index: e.index,
                true_device_id: e.device_id,
                predicted_id: None,
                d_avg: None,
                is_legitimate: None,
                error: None,
            };
            let outcome = e.vector.and_then(|v| Ok((detect(reg, &v)?, classify(reg, &v)?)));
            match outcome {
                Ok((det, cls)) => {
                    d.d_avg = Some(det.d_avg);
                    d.is_legitimate = Some(det.is_legitimate);
                    d.predicted_id = Some(cls.predicted_id);
                }
                Err(err) => d.error = Some(err.to_string()),
            }
            d
        })
        .collect())
}

/// Packets of enrolled devices are the legitimate queries; packets of any
/// other device, plus everything in `rogue`, are rogue queries.
pub fn evaluate_datasets(
    reg: &Registry,
    legit: &Dataset,
    rogue: Option<&Dataset>,
    wf: &WeightFile,
    pipeline: &PipelineConfig,
) -> Result<EvalReport> {
    let mut legit_q = Vec::new();
    let mut rogue_q = Vec::new();
    let mut failed = 0;
    for ds in std::iter::once(legit).chain(rogue) {
        let is_rogue_set = !std::ptr::eq(ds, legit);
        for e in embed_dataset(ds, wf, pipeline)? {
            let Ok(v) = e.vector else {
                failed += 1;
                continue;
            };
            if !is_rogue_set && reg.contains(&e.device_id) {
                legit_q.push((e.device_id, v));
            } else {
                rogue_q.push(v);
            }
        }
    }
    if failed > 0 {
        warn!("{failed} packets failed preprocessing and were excluded");
    }
    evaluate(reg, &legit_q, &rogue_q)
}
