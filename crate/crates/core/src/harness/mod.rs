//! Experiment orchestration: fleets, scenario datasets, augmentation,
//! training, enrollment, identification and evaluation, all driven by one
//! TOML config.

pub mod commands;
pub mod dataset;
pub mod fleet;
pub mod scenario;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::AugmentRanges;
use crate::embedder::{EmbedderConfig, PipelineConfig, TrainConfig};
use crate::registry::DEFAULT_K;
use crate::{Error, Result};
pub use commands::*;
pub use dataset::{Dataset, DatasetManifest, PacketEntry};
pub use fleet::{ClusterAllocation, Fleet, FleetConfig, FleetDevice, Role};
pub use scenario::ScenarioSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Preset name; ignored when `scenario` is given.
    pub preset: String,
    pub scenario: Option<ScenarioSpec>,
    pub n_packets_per_device: Option<usize>,
    pub roles: Option<Vec<Role>>,
    pub device_ids: Option<Vec<String>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            preset: "clean".into(),
            scenario: None,
            n_packets_per_device: None,
            roles: None,
            device_ids: None,
        }
    }
}

impl DatasetSection {
    /// Preset or inline scenario with overrides applied and `seed` set.
    pub fn resolve(&self, seed: u64) -> Result<ScenarioSpec> {
        let mut s = match &self.scenario {
            Some(s) => s.clone(),
            None => ScenarioSpec::preset(&self.preset)?,
        };
        if let Some(n) = self.n_packets_per_device {
            s.n_packets_per_device = n;
        }
        if let Some(r) = &self.roles {
            s.roles = r.clone();
        }
        if let Some(ids) = &self.device_ids {
            s.device_ids = ids.clone();
        }
        s.seed = seed;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub factor: usize,
    pub ranges: AugmentRanges,
    pub allow_non_clean: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            factor: 2,
            ranges: AugmentRanges::default(),
            allow_non_clean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrollSection {
    pub templates_per_device: usize,
    pub k_neighbors: usize,
    /// Calibrate the rogue threshold on packets beyond the templates.
    pub target_tpr: Option<f64>,
    /// Timestamp stored in new records. Falls back to `SOURCE_DATE_EPOCH`,
    /// then the current time.
    pub enrolled_at: Option<u64>,
    /// Load a registry built with another extractor anyway.
    pub force: bool,
}

impl Default for EnrollSection {
    fn default() -> Self {
        Self {
            templates_per_device: 100,
            k_neighbors: DEFAULT_K,
            target_tpr: None,
            enrolled_at: None,
            force: false,
        }
    }
}

impl EnrollSection {
    pub fn timestamp(&self) -> u64 {
        self.enrolled_at
            .or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok()?.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            })
    }
}

/// Everything one experiment needs. Every field has a default, so an empty
/// file is a valid config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub fleet: FleetConfig,
    pub dataset: DatasetSection,
    pub augment: AugmentSection,
    pub embedder: EmbedderConfig,
    pub train: TrainConfig,
    pub enroll: EnrollSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.fleet.validate()?;
        self.augment.ranges.validate()?;
        if self.augment.factor == 0 {
            return Err(Error::Config("augment.factor must be >= 1".into()));
        }
        let shaped = EmbedderConfig {
            input_shape: self.pipeline.feature_shape(),
            ..self.embedder.clone()
        };
        shaped.validate()?;
        self.train.validate()?;
        if self.enroll.k_neighbors == 0 || self.enroll.templates_per_device == 0 {
            return Err(Error::Config("enroll.k_neighbors and templates_per_device must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
