use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mipa::data::{write_coco_pairs, PairingRule, IR_DIR, RGB_DIR};
use mipa::train::{
    load_pairs, run_ablation_grid, run_eval, run_training, DatasetConfig, EvalModality, ExperimentConfig, GridSpec,
    Split,
};

#[derive(Parser)]
#[command(name = "mipa", version, about = "Mixed-patch RGB/IR detector training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// `dotted.key=value`; the value is parsed as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = ExperimentConfig::load(path, &self.overrides)
            .with_context(|| format!("loading config {}", path.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on pure RGB and/or pure IR test images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// rgb, ir or both-separately.
        #[arg(long, default_value = "both-separately")]
        modality: String,
    },
    /// Run an ablation grid over several seeds.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Grid spec (JSON: `{"axes": [{"key": ..., "values": [...]}]}`).
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Comma-separated seeds; defaults to three seeds from `--seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write the synthetic dataset as PNG pairs with COCO annotations.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let out = run_training(&cfg, Some(&common.out_dir))?;
            println!("{}", serde_json::to_string_pretty(&out.final_report.row())?);
            log::info!("outputs in {}", common.out_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            modality,
        } => {
            let modality: EvalModality = modality.parse()?;
            let cfg = common.config.is_some().then(|| common.load()).transpose()?;
            let exec = cfg.as_ref().map(|c| c.execution).unwrap_or_default();
            let report = run_eval(&checkpoint, cfg.as_ref(), modality, exec)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            std::fs::create_dir_all(&common.out_dir)?;
            write_json(&common.out_dir.join("report.json"), &report.to_json())?;
            let mut w = csv::Writer::from_path(common.out_dir.join("report.csv"))?;
            w.serialize(report.row())?;
            w.flush()?;
            println!("{}", serde_json::to_string_pretty(&report.row())?);
        }
        Command::Grid { common, grid, seeds } => {
            let base = common.load()?;
            let spec: GridSpec = match &grid {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing grid {}", p.display()))?,
                None => GridSpec::default(),
            };
            let seeds = if seeds.is_empty() {
                (0..3).map(|k| base.seed + k).collect()
            } else {
                seeds
            };
            let out = run_ablation_grid(&base, &spec, &seeds, Some(&common.out_dir))?;
            for r in &out.rows {
                let (m, s) = r.ap50(2).unwrap_or((f64::NAN, f64::NAN));
                println!("{:<40} AP50 avg {:.4} ± {:.4} ({}/{} runs)", r.label, m, s, r.n_ok(), r.runs.len());
            }
        }
        Command::GenData { common } => {
            let cfg = common.load()?;
            let DatasetConfig::Synthetic { spec, .. } = &cfg.dataset else {
                bail!("gen-data needs a synthetic dataset config");
            };
            let exec = cfg.execution;
            let classes = spec.object_classes;
            let root = &common.out_dir;
            let train = load_pairs(&cfg.dataset, Split::Train, cfg.encoder.patch_size, exec)?;
            let test = load_pairs(&cfg.dataset, Split::Test, cfg.encoder.patch_size, exec)?;
            let train_ann = write_coco_pairs(&train, root, "train.json", classes)?;
            let test_ann = write_coco_pairs(&test, root, "test.json", classes)?;
            // A ready-to-use config pointing at the exported files.
            let mut coco_cfg = cfg.clone();
            coco_cfg.dataset = DatasetConfig::Coco {
                root: ".".into(),
                train_annotations: train_ann.file_name().expect("file").into(),
                test_annotations: test_ann.file_name().expect("file").into(),
                pairing: PairingRule {
                    from: RGB_DIR.into(),
                    to: IR_DIR.into(),
                },
                image_size: spec.image_size,
                num_classes: classes,
            };
            write_json(&root.join("config.json"), &serde_json::to_value(&coco_cfg)?)?;
            println!(
                "wrote {} train and {} test pairs to {}",
                train.len(),
                test.len(),
                root.display()
            );
        }
    }
    Ok(())
}
