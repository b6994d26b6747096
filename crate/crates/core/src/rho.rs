//! Per-batch IR ratio policies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipaError, Result};
use crate::rng::{stream_rng, streams};

/// Declarative description of a policy, as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSpec {
    Fixed { value: f64 },
    Curriculum { warmup_value: f64, warmup_epochs: usize },
    Variable,
}

impl RhoSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |v: f64, what: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MipaError::InvalidValue(format!("{what} {v} outside [0, 1]")))
            }
        };
        match *self {
            RhoSpec::Fixed { value } => check(value, "fixed rho"),
            RhoSpec::Curriculum { warmup_value, .. } => check(warmup_value, "warmup rho"),
            RhoSpec::Variable => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            RhoSpec::Fixed { value } => format!("fixed[{value:.2}]"),
            RhoSpec::Curriculum {
                warmup_value,
                warmup_epochs,
            } => format!("curriculum[{warmup_value:.2}/{warmup_epochs}ep]"),
            RhoSpec::Variable => "variable".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RhoPolicy {
    spec: RhoSpec,
    rng_seed: u64,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
}

impl RhoPolicy {
    pub fn new(spec: RhoSpec, rng_seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng_seed,
            rng: stream_rng(rng_seed, streams::RHO, 0),
            epoch: 0,
            step: 0,
        })
    }

    pub fn fixed(value: f64, rng_seed: u64) -> Result<Self> {
        Self::new(RhoSpec::Fixed { value }, rng_seed)
    }

    pub fn curriculum(warmup_value: f64, warmup_epochs: usize, rng_seed: u64) -> Result<Self> {
        Self::new(
            RhoSpec::Curriculum {
                warmup_value,
                warmup_epochs,
            },
            rng_seed,
        )
    }

    pub fn variable(rng_seed: u64) -> Result<Self> {
        Self::new(RhoSpec::Variable, rng_seed)
    }

    pub fn spec(&self) -> &RhoSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    /// Draw ρ for the next batch. The uniform stream only advances when a
    /// uniform draw is actually made, so a curriculum policy replays the
    /// variable policy's sequence once its warmup is over.
    pub fn next_rho(&mut self) -> f64 {
        self.step += 1;
        match self.spec {
            RhoSpec::Fixed { value } => value,
            RhoSpec::Curriculum {
                warmup_value,
                warmup_epochs,
            } if self.epoch < warmup_epochs => warmup_value,
            _ => self.rng.gen_range(0.0..=1.0),
        }
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }
}
