use serde::{Deserialize, Serialize};

use super::fleet::Role;
use crate::channel::{AugmentRanges, Range};
use crate::{Error, Result};

/// Doppler values of the sweep presets, in Hz.
pub const DOPPLER_SWEEP_HZ: [f64; 5] = [0.0, 10.0, 30.0, 50.0, 100.0];
/// Walking speed of 2 m/s at 868 MHz.
pub const MOBILE_DOPPLER_HZ: f64 = 5.8;
pub const OBJECT_MOVING_DOPPLER_HZ: f64 = 2.0;

/// Channel conditions and packet counts for one synthesized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Per-packet channel draw; use `Range::fixed` for constant values.
    pub channel: AugmentRanges,
    pub n_packets_per_device: usize,
    /// Fleet roles included when `device_ids` is empty.
    pub roles: Vec<Role>,
    #[serde(default)]
    pub device_ids: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Flat, high-SNR line-of-sight capture suitable as augmentation input.
    #[serde(default)]
    pub clean: bool,
    /// Upper bound on the random silent padding placed before and after
    /// each packet, in samples.
    #[serde(default = "default_padding")]
    pub max_padding: usize,
    /// Recorded for completeness; the simulator has no clock drift.
    #[serde(default = "default_interval")]
    pub transmission_interval_s: f64,
}

fn default_padding() -> usize {
    512
}

fn default_interval() -> f64 {
    0.3
}

/// Multipath ranges shared by the indoor presets.
fn indoor(fd: f64) -> AugmentRanges {
    AugmentRanges {
        rms_delay_spread_s: Range::new(5e-9, 300e-9),
        max_doppler_hz: Range::fixed(fd),
        rician_k: Range::new(0.0, 10.0),
        snr_db: Range::new(30.0, 40.0),
    }
}

impl ScenarioSpec {
    fn base(name: &str, channel: AugmentRanges, n: usize, roles: Vec<Role>, clean: bool) -> Self {
        Self {
            name: name.into(),
            channel,
            n_packets_per_device: n,
            roles,
            device_ids: Vec::new(),
            seed: 0,
            clean,
            max_padding: default_padding(),
            transmission_interval_s: default_interval(),
        }
    }

    /// Named presets: `clean`, `enroll`, `stationary`, `object-moving`,
    /// `mobile`, and `doppler-<hz>` for each sweep value.
    pub fn preset(name: &str) -> Result<Self> {
        let clean = AugmentRanges {
            rms_delay_spread_s: Range::fixed(5e-9),
            max_doppler_hz: Range::fixed(0.0),
            rician_k: Range::fixed(f64::INFINITY),
            snr_db: Range::fixed(60.0),
        };
        let all = vec![Role::Train, Role::Enroll, Role::Rogue];
        Ok(match name {
            "clean" => Self::base(name, clean, 500, vec![Role::Train], true),
            "enroll" => Self::base(name, clean, 100, vec![Role::Train, Role::Enroll], true),
            "stationary" => Self::base(name, indoor(0.0), 100, all, false),
            "object-moving" => Self::base(name, indoor(OBJECT_MOVING_DOPPLER_HZ), 100, all, false),
            "mobile" => Self::base(name, indoor(MOBILE_DOPPLER_HZ), 100, all, false),
            other => {
                let fd = other
                    .strip_prefix("doppler-")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| DOPPLER_SWEEP_HZ.contains(v))
                    .ok_or_else(|| Error::Config(format!("unknown scenario preset {other:?}")))?;
                Self::base(other, indoor(fd), 100, all, false)
            }
        })
    }

    pub fn preset_names() -> Vec<String> {
        let mut v: Vec<String> = ["clean", "enroll", "stationary", "object-moving", "mobile"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(DOPPLER_SWEEP_HZ.iter().map(|f| format!("doppler-{f}")));
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if self.n_packets_per_device == 0 {
            return Err(Error::Config(format!("scenario {}: zero packets per device", self.name)));
        }
        if self.roles.is_empty() && self.device_ids.is_empty() {
            return Err(Error::Config(format!("scenario {}: selects no devices", self.name)));
        }
        Ok(())
    }
}
