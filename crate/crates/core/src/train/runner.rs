//! The training loop and unimodal evaluation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agnostic::{lambda_schedule, total_loss, GrlGate};
use crate::error::{MipaError, Result};
use crate::eval::{build_report, EvalReport};
use crate::exec::Execution;
use crate::model::{BatchItem, Detector, ModalityPath, StepSpec};
use crate::mosaic::{mix, modality_map_from_mask, sample_mask, PatchGrid};
use crate::nn::{AdamW, ParamStore};
use crate::rho::RhoPolicy;
use crate::rng::{derive_seed, stream_rng, streams};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Regime};
use super::dataset::{prepare_dataset, prepare_split, PreparedSet, Split};
use super::metrics::{write_metrics_csv, MetricsRecord, RecordKind};
use super::plot::plot_training_curves;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalModality {
    Rgb,
    Ir,
    BothSeparately,
}

impl FromStr for EvalModality {
    type Err = MipaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "ir" => Ok(Self::Ir),
            "both-separately" | "both_separately" => Ok(Self::BothSeparately),
            other => Err(MipaError::Config(format!(
                "unknown modality {other:?} (expected rgb, ir or both-separately)"
            ))),
        }
    }
}

/// Evaluate on pure images of each requested modality; mosaics are never
/// used at test time.
pub fn evaluate(
    model: &Detector<f32>,
    test: &PreparedSet,
    modality: EvalModality,
    score_threshold: f64,
    exec: Execution,
) -> Result<EvalReport> {
    let gts = test.gts();
    let run = |pick_ir: bool| -> Result<Vec<_>> {
        let grids: Vec<(u64, &PatchGrid<f32>)> = test
            .samples
            .iter()
            .map(|s| (s.id, if pick_ir { &s.grid_f } else { &s.grid_g }))
            .collect();
        model.predict_many(&grids, score_threshold, exec)
    };
    let rgb = matches!(modality, EvalModality::Rgb | EvalModality::BothSeparately)
        .then(|| run(false))
        .transpose()?;
    let ir = matches!(modality, EvalModality::Ir | EvalModality::BothSeparately)
        .then(|| run(true))
        .transpose()?;
    Ok(build_report(rgb.as_deref(), ir.as_deref(), &gts, test.num_classes, exec))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_report: EvalReport,
    pub best_report: EvalReport,
    pub best_epoch: usize,
    pub model: Detector<f32>,
    pub best_params: ParamStore<f32>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn train_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Train)
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Eval)
    }
}

/// Files written by [`run_training`] into its output directory.
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub config: PathBuf,
    pub plot: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            report: dir.join("report.json"),
            checkpoint: dir.join("checkpoint.bin"),
            best_checkpoint: dir.join("checkpoint_best.bin"),
            config: dir.join("config.json"),
            plot: dir.join("training.svg"),
        }
    }
}

fn with_step(e: MipaError, step: usize) -> MipaError {
    match e {
        MipaError::NonFinite { what, .. } => MipaError::NonFinite { what, step },
        other => other,
    }
}

/// One training input: either a borrowed pure image or an owned mosaic.
enum Input<'a> {
    Pure(&'a PatchGrid<f32>),
    Mosaic(PatchGrid<f32>, ndarray::Array2<u8>),
}

pub fn run_training(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let exec = cfg.execution;
    let (train, test) = prepare_dataset(&cfg.dataset, cfg.encoder.patch_size, mcfg.final_grid(), exec)?;
    if train.is_empty() || test.is_empty() {
        return Err(MipaError::Config("dataset has no usable samples".into()));
    }
    let (gh, gw) = mcfg.patch_grid();
    let mut model: Detector<f32> = Detector::new(&mcfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.adamw.clone(), &model.params);
    let mut policy = cfg
        .rho_policy
        .clone()
        .map(|spec| RhoPolicy::new(spec, cfg.seed))
        .transpose()?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let eval_set = test.head(cfg.eval.max_images);
    let paths = out_dir.map(OutputPaths::in_dir);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(&paths.as_ref().expect("set").config, serde_json::to_string_pretty(cfg)?)?;
    }

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, EvalReport, ParamStore<f32>)> = None;
    let mut last_report = None;
    let mut step = 0usize;
    let mut slot = 0u64;

    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.optimizer.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, streams::SHUFFLE, epoch as u64));
        let (mut sum_det, mut sum_ma, mut n_batches) = (0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let s = step as f64 / total_steps as f64;
            let rho = match cfg.regime {
                Regime::RgbOnly => 0.0,
                Regime::IrOnly => 1.0,
                Regime::Both => cfg.both_rho.expect("validated"),
                Regime::Mipa | Regime::MipaMa => policy.as_mut().expect("validated").next_rho(),
            };
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &train.samples[i];
                let input = match cfg.regime {
                    Regime::RgbOnly => Input::Pure(&sample.grid_g),
                    Regime::IrOnly => Input::Pure(&sample.grid_f),
                    Regime::Both => {
                        let u: f64 = stream_rng(cfg.seed, streams::BOTH_SLOT, slot).gen();
                        Input::Pure(if u < rho { &sample.grid_f } else { &sample.grid_g })
                    }
                    Regime::Mipa | Regime::MipaMa => {
                        let mask = sample_mask(sample.grid_f.n(), rho, derive_seed(cfg.seed, streams::MASK, slot))?;
                        let map = modality_map_from_mask(&mask, gh, gw)?;
                        Input::Mosaic(mix(&sample.grid_f, &sample.grid_g, &mask)?, map)
                    }
                };
                inputs.push(input);
                slot += 1;
            }
            let items: Vec<BatchItem<'_>> = inputs
                .iter()
                .zip(batch)
                .map(|(inp, &i)| match inp {
                    Input::Pure(g) => BatchItem {
                        grid: g,
                        targets: &train.samples[i].targets,
                        modality_map: None,
                    },
                    Input::Mosaic(g, m) => BatchItem {
                        grid: g,
                        targets: &train.samples[i].targets,
                        modality_map: Some(m),
                    },
                })
                .collect();

            let lambda = match (&cfg.ma, cfg.regime) {
                (Some(ma), Regime::MipaMa) => Some(match ma.lambda_override {
                    Some(l) => l,
                    None => lambda_schedule(ma.gamma, s)?,
                }),
                _ => None,
            };
            let spec = StepSpec {
                lambda_reg: cfg.det.lambda_reg,
                det_weight: 1.0,
                modality: match lambda {
                    Some(l) => ModalityPath::Reversed(GrlGate::constant(l)),
                    None => ModalityPath::Off,
                },
            };
            let out = model
                .batch_grad(&items, &spec, exec)
                .map_err(|e| with_step(e, step + 1))?;
            let l_total = total_loss(out.l_det, out.l_ma, lambda.unwrap_or(0.0)).map_err(|e| with_step(e, step + 1))?;
            if !out.grads.all_finite() {
                let e = MipaError::NonFinite {
                    what: "gradients".into(),
                    step: step + 1,
                };
                if let Some(p) = &paths {
                    write_metrics_csv(&p.metrics, &records)?;
                }
                return Err(e);
            }
            opt.step(&mut model.params, &out.grads);
            step += 1;
            sum_det += out.l_det;
            sum_ma += out.l_ma;
            n_batches += 1;

            if step % cfg.log_every == 0 {
                let mut r = MetricsRecord::empty(RecordKind::Train, epoch, step, s);
                r.rho_drawn = Some(rho);
                r.lambda_ma = lambda;
                r.l_det = Some(out.l_det);
                r.l_cls = Some(out.l_cls);
                r.l_reg = Some(out.l_reg);
                r.l_ma = lambda.map(|_| out.l_ma);
                r.l_total = Some(l_total);
                log::debug!("epoch {epoch} step {step}: l_det {:.5} l_ma {:.5}", out.l_det, out.l_ma);
                records.push(r);
            }
        }
        if let Some(p) = policy.as_mut() {
            p.advance_epoch();
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        if cfg.eval.every_epoch || last_epoch {
            let report = evaluate(&model, &eval_set, EvalModality::BothSeparately, cfg.det.score_threshold, exec)?;
            let mut r = MetricsRecord::empty(RecordKind::Eval, epoch, step, step as f64 / total_steps as f64);
            r.l_det = Some(sum_det / n_batches as f64);
            r.l_ma = (cfg.regime == Regime::MipaMa).then(|| sum_ma / n_batches as f64);
            r = r.with_eval(report.row());
            let avg = report.row().ap50_avg.unwrap_or(0.0);
            log::info!(
                "epoch {} done: l_det {:.4}, AP50 rgb {:.3} ir {:.3} avg {:.3}",
                epoch + 1,
                sum_det / n_batches as f64,
                report.row().ap50_rgb.unwrap_or(0.0),
                report.row().ap50_ir.unwrap_or(0.0),
                avg
            );
            records.push(r);
            if best.as_ref().map_or(true, |b| avg > b.0) {
                best = Some((avg, epoch, report.clone(), model.params.clone()));
            }
            last_report = Some(report);
        }
    }

    let (_, best_epoch, best_report, best_params) = best.expect("last epoch is always evaluated");
    // The final report covers the full test set even when per-epoch
    // evaluation used a subset.
    let final_report = if eval_set.len() == test.len() {
        last_report.expect("last epoch is always evaluated")
    } else {
        evaluate(&model, &test, EvalModality::BothSeparately, cfg.det.score_threshold, exec)?
    };

    if let Some(p) = &paths {
        write_metrics_csv(&p.metrics, &records)?;
        std::fs::write(&p.report, serde_json::to_string_pretty(&final_report.to_json())?)?;
        let meta = |epoch: usize| {
            serde_json::json!({
                "epoch": epoch + 1,
                "steps": step,
                "experiment": cfg,
            })
        };
        Checkpoint::new(&mcfg, &model.params, meta(cfg.epochs - 1)).save(&p.checkpoint)?;
        Checkpoint::new(&mcfg, &best_params, meta(best_epoch)).save(&p.best_checkpoint)?;
        plot_training_curves(&p.plot, &records)?;
    }

    Ok(TrainOutcome {
        records,
        final_report,
        best_report,
        best_epoch,
        model,
        best_params,
        steps: step,
    })
}

/// Load a checkpoint and evaluate it on the test split of `cfg`'s dataset
/// (or the dataset stored in the checkpoint when `cfg` is `None`).
pub fn run_eval(
    checkpoint: &Path,
    cfg: Option<&ExperimentConfig>,
    modality: EvalModality,
    exec: Execution,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => serde_json::from_value(ck.meta["experiment"].clone())
            .map_err(|e| MipaError::Checkpoint(format!("no usable experiment config stored: {e}")))?,
    };
    let mcfg = cfg.model_config();
    ck.check_compatible(&mcfg)?;
    let model = Detector::from_params(&ck.model, ck.params)?;
    let test = prepare_split(&cfg.dataset, Split::Test, cfg.encoder.patch_size, mcfg.final_grid(), exec)?;
    evaluate(&model, &test, modality, cfg.det.score_threshold, exec)
}
