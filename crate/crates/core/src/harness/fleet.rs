use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lora_phy::{sample_profiles, DeviceProfile, ManufacturerCluster};
use crate::util::{derive_seed, str_seed};
use crate::{Error, Result};

pub const FLEET_FORMAT_VERSION: u32 = 1;

/// What a device is used for in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Seen during extractor training.
    Train,
    /// Legitimate but unseen during training; enrolled later.
    Enroll,
    /// Never enrolled.
    Rogue,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Enroll, Role::Rogue];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAllocation {
    pub cluster: String,
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub enroll: usize,
    #[serde(default)]
    pub rogue: usize,
}

impl ClusterAllocation {
    fn count(&self, role: Role) -> usize {
        match role {
            Role::Train => self.train,
            Role::Enroll => self.enroll,
            Role::Rogue => self.rogue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub allocations: Vec<ClusterAllocation>,
    /// Clusters beyond the built-in ones, referenced by name.
    pub extra_clusters: Vec<ManufacturerCluster>,
    pub id_prefix: String,
}

impl Default for FleetConfig {
    fn default() -> Self {
        let a = |c: &str, train, enroll, rogue| ClusterAllocation {
            cluster: c.into(),
            train,
            enroll,
            rogue,
        };
        Self {
            allocations: vec![
                a("model-a", 3, 2, 1),
                a("model-b", 3, 1, 1),
                a("model-c", 2, 1, 1),
                a("model-d", 2, 1, 0),
            ],
            extra_clusters: Vec::new(),
            id_prefix: "dut".into(),
        }
    }
}

impl FleetConfig {
    fn cluster(&self, name: &str) -> Result<ManufacturerCluster> {
        self.extra_clusters
            .iter()
            .cloned()
            .chain(ManufacturerCluster::defaults())
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown manufacturer cluster {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self
            .allocations
            .iter()
            .map(|a| Role::ALL.iter().map(|&r| a.count(r)).sum::<usize>())
            .sum();
        if total == 0 {
            return Err(Error::Config("fleet has no devices".into()));
        }
        for a in &self.allocations {
            self.cluster(&a.cluster)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetDevice {
    pub profile: DeviceProfile,
    pub cluster: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub format_version: u32,
    pub seed: u64,
    pub devices: Vec<FleetDevice>,
}

impl Fleet {
    /// Devices are numbered role by role (all training devices first), each
    /// role in allocation order.
    pub fn generate(cfg: &FleetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut devices = Vec::new();
        let mut next = 1;
        for (ri, role) in Role::ALL.iter().enumerate() {
            for a in &cfg.allocations {
                let n = a.count(*role);
                if n == 0 {
                    continue;
                }
                let cluster = cfg.cluster(&a.cluster)?;
                let s = derive_seed(seed, &[str_seed(&a.cluster), ri as u64]);
                for profile in sample_profiles(&cluster, &cfg.id_prefix, next, n, s) {
                    devices.push(FleetDevice {
                        profile,
                        cluster: a.cluster.clone(),
                        role: *role,
                    });
                }
                next += n;
            }
        }
        Ok(Self {
            format_version: FLEET_FORMAT_VERSION,
            seed,
            devices,
        })
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &FleetDevice> {
        self.devices.iter().filter(move |d| d.role == role)
    }

    pub fn get(&self, device_id: &str) -> Option<&FleetDevice> {
        self.devices.iter().find(|d| d.profile.device_id == device_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fleet serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fleet: Fleet = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if fleet.format_version != FLEET_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "fleet format {}, this build reads {FLEET_FORMAT_VERSION}",
                fleet.format_version
            )));
        }
        for d in &fleet.devices {
            d.profile.validate()?;
        }
        Ok(fleet)
    }
}
