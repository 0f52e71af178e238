//! Packet datasets: one interleaved f32 little-endian IQ blob plus a JSON
//! manifest with per-packet offsets, device ids, channel parameters and
//! seeds.

use std::collections::BTreeMap;
use std::path::Path;

use log::debug;
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fleet::Fleet;
use super::scenario::ScenarioSpec;
use crate::channel::{transmit_segment, AugmentRanges, ChannelSpec};
use crate::lora_phy::{apply_impairments, make_preamble, IqFrame, LoraConfig};
use crate::util::{derive_seed, sha256_hex, str_seed};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const IQ_FILE: &str = "iq.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketEntry {
    pub index: usize,
    /// Offset into the IQ blob, in complex samples.
    pub offset: u64,
    pub len: usize,
    pub device_id: String,
    /// First sample of the preamble inside the packet.
    pub signal_start: usize,
    pub signal_len: usize,
    pub channel: ChannelSpec,
    pub impairment_seed: u64,
    /// For augmented copies: index of the source packet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub lora: LoraConfig,
    pub scenario: ScenarioSpec,
    pub clean: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationRecord>,
    /// SHA-256 of the IQ blob.
    pub iq_sha256: String,
    pub entries: Vec<PacketEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_dataset_id: String,
    pub factor: usize,
    pub ranges: AugmentRanges,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub packets: Vec<Vec<Complex32>>,
}

fn to_f32(s: &[Complex64]) -> Vec<Complex32> {
    s.iter().map(|c| Complex32::new(c.re as f32, c.im as f32)).collect()
}

impl Dataset {
    fn from_parts(
        dataset_id: String,
        lora: LoraConfig,
        scenario: ScenarioSpec,
        clean: bool,
        augmentation: Option<AugmentationRecord>,
        mut entries: Vec<PacketEntry>,
        packets: Vec<Vec<Complex32>>,
    ) -> Self {
        let mut offset = 0u64;
        for (i, (e, p)) in entries.iter_mut().zip(&packets).enumerate() {
            e.index = i;
            e.offset = offset;
            e.len = p.len();
            offset += p.len() as u64;
        }
        let mut ds = Self {
            manifest: DatasetManifest {
                format_version: DATASET_FORMAT_VERSION,
                dataset_id,
                lora,
                scenario,
                clean,
                augmentation,
                iq_sha256: String::new(),
                entries,
            },
            packets,
        };
        ds.manifest.iq_sha256 = sha256_hex(&ds.iq_bytes());
        ds
    }

    /// Synthesizes `scenario` for the selected fleet devices: impairments,
    /// random padding, a drawn channel and noise per packet.
    pub fn generate(fleet: &Fleet, scenario: &ScenarioSpec, lora: &LoraConfig) -> Result<Self> {
        scenario.validate()?;
        lora.validate()?;
        let devices: Vec<_> = if scenario.device_ids.is_empty() {
            fleet.devices.iter().filter(|d| scenario.roles.contains(&d.role)).collect()
        } else {
            scenario
                .device_ids
                .iter()
                .map(|id| {
                    fleet
                        .get(id)
                        .ok_or_else(|| Error::Config(format!("device {id:?} is not in the fleet")))
                })
                .collect::<Result<_>>()?
        };
        if devices.is_empty() {
            return Err(Error::Config(format!("scenario {} selects no fleet devices", scenario.name)));
        }
        let pre = make_preamble(lora)?;
        let mut entries = Vec::new();
        let mut packets = Vec::new();
        for dev in devices {
            let id = &dev.profile.device_id;
            for p in 0..scenario.n_packets_per_device {
                let base = derive_seed(scenario.seed, &[str_seed(id), p as u64]);
                let impairment_seed = derive_seed(base, &[1]);
                let tx = apply_impairments(&pre, &dev.profile, impairment_seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[3]));
                let before = rng.random_range(0..=scenario.max_padding);
                let after = rng.random_range(0..=scenario.max_padding);
                let mut samples = vec![Complex64::new(0.0, 0.0); before];
                samples.extend_from_slice(&tx.samples);
                samples.resize(before + tx.len() + after, Complex64::new(0.0, 0.0));
                let padded = tx.derive(samples);
                let spec = scenario.channel.draw(derive_seed(base, &[2]))?;
                let rx = transmit_segment(&padded, &spec, before..before + tx.len())
                    .map_err(|e| Error::Contract(format!("packet {} of {id}: {e}", p)))?;
                entries.push(PacketEntry {
                    index: 0,
                    offset: 0,
                    len: 0,
                    device_id: id.clone(),
                    signal_start: before,
                    signal_len: tx.len(),
                    channel: spec,
                    impairment_seed,
                    source_index: None,
                });
                packets.push(to_f32(&rx.samples));
            }
        }
        let id = format!("{}-{:016x}", scenario.name, scenario.seed);
        Ok(Self::from_parts(id, lora.clone(), scenario.clone(), scenario.clean, None, entries, packets))
    }

    /// Originals followed by `factor - 1` augmented copies of each, with
    /// channels drawn from `ranges`.
    pub fn augment(&self, ranges: &AugmentRanges, factor: usize, seed: u64, allow_non_clean: bool) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("augmentation factor must be >= 1".into()));
        }
        ranges.validate()?;
        if !self.manifest.clean && !allow_non_clean {
            return Err(Error::Contract(format!(
                "dataset {} is not a clean capture; augmentation expects flat-channel input (override to force)",
                self.manifest.dataset_id
            )));
        }
        let mut entries = self.manifest.entries.clone();
        let mut packets = self.packets.clone();
        for k in 1..factor {
            for (i, e) in self.manifest.entries.iter().enumerate() {
                let spec = ranges.draw(derive_seed(seed, &[i as u64, k as u64]))?;
                debug!(
                    "augment packet {i} copy {k}: tau {:.3e} s, fd {:.2} Hz, K {:.2}, snr {:.1} dB",
                    spec.rms_delay_spread_s, spec.max_doppler_hz, spec.rician_k, spec.snr_db
                );
                let frame = self.frame(i)?;
                let out = transmit_segment(&frame, &spec, e.signal_start..e.signal_start + e.signal_len)?;
                entries.push(PacketEntry {
                    channel: spec,
                    source_index: Some(i),
                    ..e.clone()
                });
                packets.push(to_f32(&out.samples));
            }
        }
        let id = format!("{}-aug{factor}-{seed:016x}", self.manifest.dataset_id);
        let record = AugmentationRecord {
            source_dataset_id: self.manifest.dataset_id.clone(),
            factor,
            ranges: ranges.clone(),
            seed,
        };
        Ok(Self::from_parts(
            id,
            self.manifest.lora.clone(),
            self.manifest.scenario.clone(),
            self.manifest.clean && factor == 1,
            Some(record),
            entries,
            packets,
        ))
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Packet `i` as a frame, tagged with its device id.
    pub fn frame(&self, i: usize) -> Result<IqFrame> {
        let e = self
            .manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::Contract(format!("packet index {i} out of range")))?;
        let samples = self.packets[i]
            .iter()
            .map(|c| Complex64::new(c.re as f64, c.im as f64))
            .collect();
        Ok(IqFrame::new(samples, self.manifest.lora.sample_rate_hz)?
            .with_meta("device_id", &e.device_id)
            .with_meta("packet_index", i))
    }

    /// Packet indices grouped by device, in device-id order.
    pub fn by_device(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for e in &self.manifest.entries {
            m.entry(e.device_id.clone()).or_default().push(e.index);
        }
        m
    }

    pub fn iq_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.packets.iter().map(Vec::len).sum::<usize>());
        for p in &self.packets {
            for c in p {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let iq = dir.join(IQ_FILE);
        std::fs::write(&iq, self.iq_bytes()).map_err(|e| Error::io(&iq, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "dataset format {}, this build reads {DATASET_FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let iq = dir.join(IQ_FILE);
        let bytes = std::fs::read(&iq).map_err(|e| Error::io(&iq, e))?;
        if sha256_hex(&bytes) != manifest.iq_sha256 {
            return Err(Error::Integrity(format!("{}: IQ blob does not match manifest hash", iq.display())));
        }
        let mut packets = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let start = e.offset as usize * 8;
            let end = start + e.len * 8;
            let chunk = bytes.get(start..end).ok_or_else(|| {
                Error::Integrity(format!("packet {} references bytes {start}..{end} beyond the blob", e.index))
            })?;
            packets.push(
                chunk
                    .chunks_exact(8)
                    .map(|b| {
                        Complex32::new(
                            f32::from_le_bytes(b[..4].try_into().unwrap()),
                            f32::from_le_bytes(b[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            );
        }
        Ok(Self { manifest, packets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::synchronize;
    use crate::harness::fleet::{FleetConfig, Role};

    fn small() -> (Fleet, ScenarioSpec) {
        let fleet = Fleet::generate(&FleetConfig::default(), 2).unwrap();
        let mut s = ScenarioSpec::preset("clean").unwrap();
        s.n_packets_per_device = 3;
        s.seed = 9;
        (fleet, s)
    }

    #[test]
    fn entry_count_and_offsets() {
        let (fleet, s) = small();
        let ds = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        assert_eq!(ds.len(), 10 * 3);
        let mut expected = 0;
        for e in &ds.manifest.entries {
            assert_eq!(e.offset, expected);
            expected += e.len as u64;
            assert!(e.signal_start + e.signal_len <= e.len);
        }
        assert_eq!(ds.by_device().len(), 10);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (fleet, s) = small();
        let a = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        let b = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        assert_eq!(a.iq_bytes(), b.iq_bytes());
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn padding_is_recovered_by_sync() {
        let (fleet, s) = small();
        let ds = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        for i in 0..5 {
            let sync = synchronize(&ds.frame(i).unwrap(), &LoraConfig::default()).unwrap();
            // CFO shifts a chirp's correlation peak by cfo / (bw / T):
            // up to ~2.5 samples for a 300 Hz offset.
            let diff = sync.start_index as i64 - ds.manifest.entries[i].signal_start as i64;
            assert!(diff.abs() <= 3, "sync off by {diff}");
        }
    }

    #[test]
    fn augment_factor_two_doubles_and_stays_in_ranges() {
        let (fleet, s) = small();
        let ds = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        let ranges = AugmentRanges::default();
        let aug = ds.augment(&ranges, 2, 4, false).unwrap();
        assert_eq!(aug.len(), 2 * ds.len());
        assert!(!aug.manifest.clean);
        for e in &aug.manifest.entries[ds.len()..] {
            assert!(ranges.contains(&e.channel));
            assert!(e.source_index.is_some());
        }
        assert_eq!(&aug.packets[..ds.len()], &ds.packets[..]);
        let same = ds.augment(&ranges, 1, 4, false).unwrap();
        assert_eq!(same.packets, ds.packets);
        assert!(same.manifest.clean);
    }

    #[test]
    fn augmenting_non_clean_data_is_refused() {
        let (fleet, _) = small();
        let mut s = ScenarioSpec::preset("stationary").unwrap();
        s.n_packets_per_device = 1;
        s.roles = vec![Role::Rogue];
        let ds = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        assert!(matches!(
            ds.augment(&AugmentRanges::default(), 2, 0, false),
            Err(Error::Contract(_))
        ));
        assert_eq!(ds.augment(&AugmentRanges::default(), 2, 0, true).unwrap().len(), 6);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let (fleet, s) = small();
        let ds = Dataset::generate(&fleet, &s, &LoraConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let iq = dir.path().join(IQ_FILE);
        let mut bytes = std::fs::read(&iq).unwrap();
        bytes[100] ^= 1;
        std::fs::write(&iq, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Integrity(_))));
    }
}
