//! Experiment configuration: JSON schema, regime validation and dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PairingRule, SceneSpec};
use crate::encoder::EncoderConfig;
use crate::error::{MipaError, Result};
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::nn::AdamWConfig;
use crate::rho::RhoSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RgbOnly,
    IrOnly,
    Both,
    Mipa,
    MipaMa,
}

impl Regime {
    pub fn uses_mosaics(self) -> bool {
        matches!(self, Regime::Mipa | Regime::MipaMa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaConfig {
    pub gamma: f64,
    /// Pin λ to a constant instead of following the ramp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetConfig {
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
}

fn default_lambda_reg() -> f64 {
    1.0
}
fn default_score_threshold() -> f64 {
    0.3
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            lambda_reg: default_lambda_reg(),
            score_threshold: default_score_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer_name")]
    pub name: String,
    #[serde(flatten)]
    pub adamw: AdamWConfig,
    /// Optional one-off step decay; constant rate when absent.
    #[serde(default)]
    pub lr_drop: Option<LrDrop>,
}

/// Multiply the learning rate by `factor` from epoch `epoch` (0-based) on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    pub factor: f64,
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop {
            Some(d) if epoch >= d.epoch => self.adamw.lr * d.factor,
            _ => self.adamw.lr,
        }
    }
}

fn default_optimizer_name() -> String {
    "adamw".into()
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: default_optimizer_name(),
            adamw: AdamWConfig::default(),
            lr_drop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default)]
        spec: SceneSpec,
        train_size: usize,
        test_size: usize,
    },
    Coco {
        root: PathBuf,
        train_annotations: PathBuf,
        test_annotations: PathBuf,
        pairing: PairingRule,
        image_size: [usize; 2],
        num_classes: usize,
    },
}

impl DatasetConfig {
    pub fn image_size(&self) -> [usize; 2] {
        match self {
            DatasetConfig::Synthetic { spec, .. } => spec.image_size,
            DatasetConfig::Coco { image_size, .. } => *image_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { spec, .. } => spec.object_classes,
            DatasetConfig::Coco { num_classes, .. } => *num_classes,
        }
    }

    /// Resolve relative COCO paths against the config file's directory.
    pub fn rebase(&mut self, base: &Path) {
        if let DatasetConfig::Coco {
            root,
            train_annotations,
            test_annotations,
            ..
        } = self
        {
            for p in [root, train_annotations, test_annotations] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate after every epoch; the last epoch is always evaluated.
    #[serde(default = "yes")]
    pub every_epoch: bool,
    /// Cap on test images used for the per-epoch evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every_epoch: true,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_policy: Option<RhoSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub both_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ma: Option<MaConfig>,
    #[serde(default)]
    pub det: DetConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_execution")]
    pub execution: Execution,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_batch() -> usize {
    6
}
fn default_epochs() -> usize {
    12
}
fn default_log_every() -> usize {
    10
}
fn default_execution() -> Execution {
    Execution::Sequential
}

impl ExperimentConfig {
    /// A synthetic-data config with the paper-style defaults.
    pub fn synthetic(regime: Regime, train_size: usize, test_size: usize) -> Self {
        let mut c = Self {
            regime,
            rho_policy: None,
            both_rho: None,
            ma: None,
            det: DetConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            dataset: DatasetConfig::Synthetic {
                spec: SceneSpec::default(),
                train_size,
                test_size,
            },
            encoder: EncoderConfig::default(),
            execution: default_execution(),
            log_every: default_log_every(),
            eval: EvalConfig::default(),
        };
        c.fill_regime_defaults();
        c
    }

    /// Insert defaults for the fields the regime needs and drop the rest.
    pub fn fill_regime_defaults(&mut self) {
        match self.regime {
            Regime::Both => {
                self.both_rho.get_or_insert(0.5);
            }
            Regime::Mipa | Regime::MipaMa => {
                self.rho_policy.get_or_insert(RhoSpec::Variable);
            }
            _ => {}
        }
        if self.regime == Regime::MipaMa {
            self.ma.get_or_insert(MaConfig {
                gamma: 0.1,
                lambda_override: None,
            });
        }
        self.prune_for_regime();
    }

    /// Remove regime-specific fields that the current regime does not use.
    pub fn prune_for_regime(&mut self) {
        if self.regime != Regime::Both {
            self.both_rho = None;
        }
        if !self.regime.uses_mosaics() {
            self.rho_policy = None;
        }
        if self.regime != Regime::MipaMa {
            self.ma = None;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MipaError::Config(m));
        let r = self.regime;
        let name = serde_json::to_value(r).expect("enum");
        match (r, self.both_rho) {
            (Regime::Both, None) => return bad("regime both requires both_rho".into()),
            (Regime::Both, Some(b)) if !(0.0..=1.0).contains(&b) => {
                return bad(format!("both_rho must lie in [0,1], got {b}"))
            }
            (Regime::Both, _) => {}
            (_, Some(_)) => return bad(format!("both_rho is only valid for regime both, not {name}")),
            _ => {}
        }
        match (r.uses_mosaics(), &self.rho_policy) {
            (true, None) => return bad(format!("regime {name} requires rho_policy")),
            (true, Some(p)) => p.validate()?,
            (false, Some(_)) => return bad(format!("rho_policy is only valid for mosaic regimes, not {name}")),
            (false, None) => {}
        }
        match (r, &self.ma) {
            (Regime::MipaMa, None) => return bad("regime mipa_ma requires ma.gamma".into()),
            (Regime::MipaMa, Some(ma)) => {
                if !(ma.gamma > 0.0 && ma.gamma.is_finite()) {
                    return bad(format!("ma.gamma must be positive, got {}", ma.gamma));
                }
                if let Some(l) = ma.lambda_override {
                    if !(l >= 0.0 && l.is_finite()) {
                        return bad(format!("ma.lambda_override must be >= 0, got {l}"));
                    }
                }
            }
            (_, Some(_)) => return bad(format!("ma is only valid for regime mipa_ma, not {name}")),
            _ => {}
        }
        if self.optimizer.name.to_ascii_lowercase() != "adamw" {
            return bad(format!("unsupported optimizer {:?}", self.optimizer.name));
        }
        if !(self.optimizer.adamw.lr > 0.0 && self.optimizer.adamw.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.adamw.lr));
        }
        if let Some(d) = self.optimizer.lr_drop {
            if !(d.factor > 0.0 && d.factor.is_finite()) {
                return bad(format!("optimizer.lr_drop.factor must be positive, got {}", d.factor));
            }
        }
        if self.optimizer.adamw.weight_decay < 0.0 {
            return bad("optimizer.weight_decay must be >= 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if !(self.det.lambda_reg >= 0.0) {
            return bad("det.lambda_reg must be >= 0".into());
        }
        self.encoder.validate()?;
        let [h, w] = self.dataset.image_size();
        let p = self.encoder.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(MipaError::NotDivisible {
                axis: if h % p != 0 { "height" } else { "width" },
                size: if h % p != 0 { h } else { w },
                patch_size: p,
            });
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                spec,
                train_size,
                test_size,
            } => {
                spec.validate(p)?;
                if *train_size == 0 || *test_size == 0 {
                    return bad("dataset sizes must be >= 1".into());
                }
            }
            DatasetConfig::Coco { num_classes, .. } => {
                if *num_classes == 0 {
                    return bad("dataset.num_classes must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            image_size: self.dataset.image_size(),
            num_classes: self.dataset.num_classes(),
            with_classifier: self.regime == Regime::MipaMa,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load, rebase relative dataset paths, apply overrides and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| MipaError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value)
            .map_err(|e| MipaError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.dataset.rebase(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides to an already-parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(serde_json::from_value(value).map_err(|e| MipaError::Config(e.to_string()))?)
    }
}

/// Parse an override value: JSON if it parses, else a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `a.b.c=value` sets a nested key, creating intermediate objects.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| MipaError::Config(format!("override {spec:?} is not key=value")))?;
    set_path(root, key.trim(), parse_value(raw.trim()))
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() {
        return Err(MipaError::Config("empty override key".into()));
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(o) => o,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(MipaError::Config(format!("override key {key:?}: {part:?} is not inside an object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last component")
}
