//! Patch-wise modality-agnostic module.
//!
//! A per-location linear classifier predicts, from stage-1 encoder tokens,
//! which modality each patch came from. Its gradient reaches the encoder
//! through a gradient reversal gate, so the encoder is pushed to make the
//! two modalities indistinguishable. The reversal weight ramps up with
//! training progress `s ∈ [0, 1]` (completed steps / planned steps).

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::encoder::TokenMap;
use crate::error::{MipaError, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::real::Real;

/// Probability clamp applied before the logarithms of the BCE.
pub const BCE_EPS: f64 = 1e-7;

/// `λ = 2 / (1 + exp(−γ·s)) − 1`.
pub fn lambda_schedule(gamma: f64, s: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(MipaError::InvalidValue(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(2.0 / (1.0 + (-gamma * s).exp()) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlGate {
    pub lambda_ma: f64,
    pub gamma: f64,
    pub step_fraction: f64,
}

impl GrlGate {
    pub fn scheduled(gamma: f64, step_fraction: f64) -> Result<Self> {
        Ok(Self {
            lambda_ma: lambda_schedule(gamma, step_fraction)?,
            gamma,
            step_fraction,
        })
    }

    /// Gate with a fixed weight, bypassing the schedule.
    pub fn constant(lambda_ma: f64) -> Self {
        Self {
            lambda_ma,
            gamma: 0.0,
            step_fraction: 0.0,
        }
    }
}

/// Identity on the forward pass.
pub fn grl_forward<F: Real>(features: &Array2<F>, _gate: &GrlGate) -> Array2<F> {
    features.clone()
}

/// Backward pass of the reversal: `−λ · upstream`.
pub fn grl_backward_contract<F: Real>(upstream: ArrayView2<'_, F>, gate: &GrlGate) -> Array2<F> {
    let k = F::c(-gate.lambda_ma);
    upstream.mapv(|v| v * k)
}

/// Eq. (7)-style composition with a divergence guard.
pub fn total_loss(l_det: f64, l_ma: f64, lambda_ma: f64) -> Result<f64> {
    if !(l_det.is_finite() && l_ma.is_finite() && lambda_ma.is_finite()) {
        return Err(MipaError::NonFinite {
            what: format!("loss terms (l_det={l_det}, l_ma={l_ma}, lambda={lambda_ma})"),
            step: 0,
        });
    }
    Ok(l_det + lambda_ma * l_ma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMapPrediction {
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl ModalityMapPrediction {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        let probabilities = logits.mapv(sigmoid);
        Self {
            logits,
            probabilities,
        }
    }

    pub fn from_probabilities(probabilities: Array2<f64>) -> Self {
        let logits = probabilities.mapv(|p| (p / (1.0 - p)).ln());
        Self {
            logits,
            probabilities,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.logits.dim()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Single linear layer applied independently at every stage-1 location.
#[derive(Debug, Clone, Copy)]
pub struct ModalityClassifier {
    pub proj: Linear,
}

impl ModalityClassifier {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, dim: usize, init: Init, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, "classifier.proj", dim, 1, init, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        features: &TokenMap<F>,
    ) -> Result<ModalityMapPrediction> {
        if features.dim() != self.proj.d_in {
            return Err(MipaError::Shape {
                expected: format!("{}-dim stage-1 tokens", self.proj.d_in),
                got: format!("{}-dim tokens", features.dim()),
            });
        }
        let z = self.proj.forward(p, features.tokens.view());
        let logits = z
            .into_shape_with_order((features.grid_h, features.grid_w))
            .expect("one logit per token")
            .mapv(|v| v.as_f64());
        Ok(ModalityMapPrediction::from_logits(logits))
    }

    /// Gradient w.r.t. the classifier input given `dL/dlogits` (row-major map).
    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        features: &TokenMap<F>,
        d_logits: &Array2<f64>,
    ) -> Array2<F> {
        let dz = d_logits
            .mapv(F::c)
            .into_shape_with_order((features.tokens.nrows(), 1))
            .expect("one logit per token");
        self.proj.backward(p, g, features.tokens.view(), dz.view())
    }
}

/// Convenience wrapper matching the operation name used across the crate.
pub fn modality_classifier<F: Real>(
    stage_features: &TokenMap<F>,
    classifier: &ModalityClassifier,
    params: &ParamStore<F>,
) -> Result<ModalityMapPrediction> {
    classifier.forward(params, stage_features)
}

/// Majority pooling of a binary map by `factor × factor` cells; exact ties
/// go to 1 (IR).
pub fn pool_modality_map(map: &Array2<u8>, factor: usize) -> Result<Array2<u8>> {
    let (h, w) = map.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(MipaError::Shape {
            expected: format!("map dims divisible by {factor}"),
            got: format!("{h}x{w}"),
        });
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let cells = factor * factor;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        let ones: usize = (0..factor)
            .flat_map(|dy| (0..factor).map(move |dx| (dy, dx)))
            .map(|(dy, dx)| map[[i * factor + dy, j * factor + dx]] as usize)
            .sum();
        u8::from(2 * ones >= cells)
    }))
}

/// Mean binary cross-entropy between predicted probabilities (clamped to
/// `[ε, 1−ε]`) and a binary target map. Returns the loss and `dL/dlogits`.
pub fn modality_bce(prediction: &ModalityMapPrediction, target: &Array2<u8>) -> Result<(f64, Array2<f64>)> {
    if prediction.dim() != target.dim() {
        return Err(MipaError::Shape {
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", prediction.dim()),
        });
    }
    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(target.dim());
    for ((&p, &m), g) in prediction
        .probabilities
        .iter()
        .zip(target.iter())
        .zip(grad.iter_mut())
    {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let m = m as f64;
        loss -= m * pc.ln() + (1.0 - m) * (1.0 - pc).ln();
        // The clamp is flat outside its range.
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            *g = (p - m) / n;
        }
    }
    Ok((loss / n, grad))
}
