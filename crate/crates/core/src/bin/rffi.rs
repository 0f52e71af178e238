use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use rffi_core::embedder::{read_weights, write_weights, EpochRecord};
use rffi_core::harness::{
    enroll_dataset, evaluate_datasets, identify_dataset, train_on_dataset, Dataset, ExperimentConfig, Fleet,
};
use rffi_core::registry::Registry;
use rffi_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const FLEET_FILE: &str = "fleet.json";
pub const WEIGHTS_FILE: &str = "weights.rffw";
pub const REGISTRY_FILE: &str = "registry.bin";

#[derive(Parser)]
#[command(name = "rffi", version, about = "LoRa RF fingerprint identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample device profiles for every role.
    GenFleet {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize a dataset for one scenario.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fleet: PathBuf,
        /// Preset name; overrides `dataset.preset` and ignores an inline scenario.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Add channel-augmented copies of a clean dataset.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Train an extractor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Enroll every device of a dataset, optionally into an existing registry.
    Enroll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Remove devices from a registry.
    Revoke {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long = "device", required = true)]
        devices: Vec<String>,
    },
    /// Per-packet detection and classification decisions.
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Confusion matrix, accuracy and (with rogue packets) ROC/AUC.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Dataset whose packets are all treated as rogue.
        #[arg(long)]
        rogue: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenFleet { common }
            | Command::GenDataset { common, .. }
            | Command::Augment { common, .. }
            | Command::Train { common, .. }
            | Command::Enroll { common, .. }
            | Command::Revoke { common, .. }
            | Command::Identify { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("serializes") + "\n"))
}

fn training_log_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,best_val_loss,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.best_val_loss, r.lr);
    }
    s
}

/// Loads the config, applies the seed override and echoes the result into
/// the output directory.
fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    let out = common.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    Ok((cfg, out))
}

fn run(cmd: Command) -> Result<()> {
    let (cfg, out) = setup(cmd.common())?;
    match cmd {
        Command::GenFleet { .. } => {
            let fleet = Fleet::generate(&cfg.fleet, cfg.seed)?;
            fleet.save(&out.join(FLEET_FILE))?;
            info!("fleet of {} devices written to {}", fleet.devices.len(), out.display());
        }
        Command::GenDataset { fleet, preset, .. } => {
            let fleet = Fleet::load(&fleet)?;
            let mut section = cfg.dataset.clone();
            if let Some(p) = preset {
                section.preset = p;
                section.scenario = None;
            }
            let scenario = section.resolve(cfg.seed)?;
            let ds = Dataset::generate(&fleet, &scenario, &cfg.pipeline.lora)?;
            ds.save(&out)?;
            info!("{}: {} packets", ds.manifest.dataset_id, ds.len());
        }
        Command::Augment { dataset, factor, .. } => {
            let src = Dataset::load(&dataset)?;
            let a = &cfg.augment;
            let ds = src.augment(&a.ranges, factor.unwrap_or(a.factor), cfg.seed, a.allow_non_clean)?;
            ds.save(&out)?;
            info!("{} -> {} packets", src.len(), ds.len());
        }
        Command::Train { dataset, .. } => {
            let ds = Dataset::load(&dataset)?;
            let trained = train_on_dataset(&ds, &cfg.pipeline, &cfg.embedder, &cfg.train)?;
            let fp = write_weights(&out.join(WEIGHTS_FILE), &trained.weight_file)?;
            write_text(&out.join("training_log.csv"), &training_log_csv(&trained.outcome.history))?;
            write_json(&out.join("history.json"), &trained.outcome.history)?;
            info!(
                "best epoch {} of {}; extractor {fp}",
                trained.outcome.best_epoch,
                trained.outcome.history.len()
            );
        }
        Command::Enroll {
            dataset,
            weights,
            registry,
            ..
        } => {
            let (wf, fp) = read_weights(&weights)?;
            let mut reg = match registry {
                Some(p) => Registry::load_for_extractor(&p, &fp, cfg.enroll.force)?.0,
                None => Registry::new(fp.clone(), cfg.enroll.k_neighbors)?,
            };
            let ds = Dataset::load(&dataset)?;
            let e = &cfg.enroll;
            let summary = enroll_dataset(
                &mut reg,
                &ds,
                &wf,
                &fp,
                &cfg.pipeline,
                e.templates_per_device,
                e.timestamp(),
                e.target_tpr,
            )?;
            let hash = reg.save(&out.join(REGISTRY_FILE))?;
            write_json(&out.join("enroll_summary.json"), &summary)?;
            info!("registry of {} devices, sha256 {hash}", reg.len());
        }
        Command::Revoke { registry, devices, .. } => {
            let (mut reg, _) = Registry::load(&registry)?;
            for d in &devices {
                reg.revoke(d)?;
            }
            let hash = reg.save(&out.join(REGISTRY_FILE))?;
            info!("revoked {} devices; registry sha256 {hash}", devices.len());
        }
        Command::Identify {
            dataset,
            weights,
            registry,
            ..
        } => {
            let (wf, fp) = read_weights(&weights)?;
            let (reg, _) = Registry::load_for_extractor(&registry, &fp, cfg.enroll.force)?;
            let ds = Dataset::load(&dataset)?;
            let path = out.join("decisions.jsonl");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            let decisions = identify_dataset(&reg, &ds, &wf, &cfg.pipeline)?;
            for d in &decisions {
                let line = serde_json::to_string(d).expect("decision serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let correct = decisions
                .iter()
                .filter(|d| d.predicted_id.as_deref() == Some(d.true_device_id.as_str()))
                .count();
            info!("{} decisions, {correct} correct", decisions.len());
        }
        Command::Evaluate {
            dataset,
            weights,
            registry,
            rogue,
            ..
        } => {
            let (wf, fp) = read_weights(&weights)?;
            let (reg, reg_hash) = Registry::load_for_extractor(&registry, &fp, cfg.enroll.force)?;
            let legit = Dataset::load(&dataset)?;
            let rogue = rogue.map(|p| Dataset::load(&p)).transpose()?;
            let mut report = evaluate_datasets(&reg, &legit, rogue.as_ref(), &wf, &cfg.pipeline)?;
            report.registry_sha256 = Some(reg_hash);
            report.write(&out)?;
            match report.auc {
                Some(auc) => info!("accuracy {:.4}, AUC {auc:.4}", report.overall_accuracy),
                None => info!("accuracy {:.4} (no rogue queries, ROC omitted)", report.overall_accuracy),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
