//! The full detector: shared encoder, detection head and (optionally) the
//! modality classifier, with a per-sample forward/backward pass and a
//! data-parallel batch reduction.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agnostic::{grl_backward_contract, grl_forward, modality_bce, pool_modality_map, GrlGate, ModalityClassifier};
use crate::detect::{decode_predictions, detection_loss, DetHead, DetectionSet, Targets};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{MipaError, Result};
use crate::exec::Execution;
use crate::mosaic::PatchGrid;
use crate::nn::{Init, ParamStore};
use crate::real::Real;
use crate::rng::{derive_seed, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// `[H, W]` of the input images.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub with_classifier: bool,
}

impl ModelConfig {
    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.image_size[0] / self.encoder.patch_size,
            self.image_size[1] / self.encoder.patch_size,
        )
    }

    pub fn final_grid(&self) -> (usize, usize) {
        let (gh, gw) = self.patch_grid();
        self.encoder.final_grid(gh, gw)
    }
}

/// How the modality loss reaches the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModalityPath {
    Off,
    /// Through the gradient reversal gate.
    Reversed(GrlGate),
    /// Ordinary chain rule, no reversal. Used to check the reversal.
    Plain,
}

#[derive(Debug, Clone)]
pub struct SampleGrad<F> {
    pub l_det: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_ma: f64,
    pub grads: ParamStore<F>,
}

/// Loss weights and switches for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepSpec {
    pub lambda_reg: f64,
    pub det_weight: f64,
    pub modality: ModalityPath,
}

impl StepSpec {
    pub fn detection_only(lambda_reg: f64) -> Self {
        Self {
            lambda_reg,
            det_weight: 1.0,
            modality: ModalityPath::Off,
        }
    }
}

pub struct BatchItem<'a> {
    pub grid: &'a PatchGrid<f32>,
    pub targets: &'a Targets,
    /// Patch-level modality map; required when the modality path is on.
    pub modality_map: Option<&'a Array2<u8>>,
}

#[derive(Debug, Clone)]
pub struct Detector<F> {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: DetHead,
    pub classifier: Option<ModalityClassifier>,
    pub params: ParamStore<F>,
}

impl<F: Real> Detector<F> {
    /// Each component draws its initial weights from its own seed stream,
    /// so adding the classifier leaves encoder and head weights unchanged.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Blocks and positional tables start as the identity (zero output
    /// projections).
    pub fn new_identity(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: &ModelConfig, seed: u64, identity: bool) -> Result<Self> {
        let (gh, gw) = config.patch_grid();
        if config.image_size[0] % config.encoder.patch_size != 0
            || config.image_size[1] % config.encoder.patch_size != 0
        {
            return Err(MipaError::Config(format!(
                "image size {:?} not divisible by patch size {}",
                config.image_size, config.encoder.patch_size
            )));
        }
        let mut params = ParamStore::new();
        let rng = |s| ChaCha8Rng::seed_from_u64(derive_seed(seed, s, 0));
        let encoder = Encoder::new(&mut params, &config.encoder, gh, gw, identity, &mut rng(streams::INIT_ENCODER))?;
        let head = DetHead::new(
            &mut params,
            config.encoder.embed_dim,
            config.num_classes,
            Init::Normal(0.02),
            &mut rng(streams::INIT_HEAD),
        );
        let classifier = config.with_classifier.then(|| {
            ModalityClassifier::new(
                &mut params,
                config.encoder.embed_dim,
                Init::Normal(0.02),
                &mut rng(streams::INIT_CLASSIFIER),
            )
        });
        Ok(Self {
            config: config.clone(),
            encoder,
            head,
            classifier,
            params,
        })
    }

    /// Rebuild the layer layout for `config` and load `params` into it.
    pub fn from_params(config: &ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::build(config, 0, false)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        if expected != got {
            return Err(MipaError::Checkpoint(
                "parameter layout does not match the model config".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    /// Forward and backward for one image.
    pub fn sample_grad(&self, item: &BatchItem<'_>, spec: &StepSpec) -> Result<SampleGrad<F>> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let enc = self.encoder.forward(p, item.grid)?;
        let (raw, head_cache) = self.head.forward(p, &enc.last);
        let mut det = detection_loss(raw.view(), item.targets, spec.lambda_reg)?;
        if spec.det_weight != 1.0 {
            det.d_raw.mapv_inplace(|v| v * spec.det_weight);
        }
        let d_last = self.head.backward(p, &mut g, &head_cache, &det.d_raw);

        let mut l_ma = 0.0;
        let mut d_stage1 = None;
        if spec.modality != ModalityPath::Off {
            let clf = self
                .classifier
                .as_ref()
                .ok_or_else(|| MipaError::Config("model has no modality classifier".into()))?;
            let map = item
                .modality_map
                .ok_or_else(|| MipaError::Config("modality map required for the modality loss".into()))?;
            let factor = map.nrows() / enc.stage1.grid_h;
            let target = pool_modality_map(map, factor.max(1))?;
            let gate = match spec.modality {
                ModalityPath::Reversed(gate) => gate,
                _ => GrlGate::constant(0.0),
            };
            let mut feats = enc.stage1.clone();
            feats.tokens = grl_forward(&enc.stage1.tokens, &gate);
            let pred = clf.forward(p, &feats)?;
            let (loss, d_logits) = modality_bce(&pred, &target)?;
            l_ma = loss;
            let d_feat = clf.backward(p, &mut g, &feats, &d_logits);
            d_stage1 = Some(match spec.modality {
                ModalityPath::Reversed(gate) => grl_backward_contract(d_feat.view(), &gate),
                _ => d_feat,
            });
        }
        self.encoder
            .backward(p, &mut g, &enc.cache, d_stage1.as_ref(), &d_last);
        Ok(SampleGrad {
            l_det: det.total,
            l_cls: det.cls,
            l_reg: det.reg,
            l_ma,
            grads: g,
        })
    }

    /// Mean losses and mean gradients over a batch. Per-sample work runs
    /// under `exec`; the reduction is sequential in batch order.
    pub fn batch_grad(&self, items: &[BatchItem<'_>], spec: &StepSpec, exec: Execution) -> Result<SampleGrad<F>> {
        let per: Vec<Result<SampleGrad<F>>> = exec.map(items, |it| self.sample_grad(it, spec));
        let mut acc: Option<SampleGrad<F>> = None;
        for r in per {
            let s = r?;
            match acc.as_mut() {
                None => acc = Some(s),
                Some(a) => {
                    a.l_det += s.l_det;
                    a.l_cls += s.l_cls;
                    a.l_reg += s.l_reg;
                    a.l_ma += s.l_ma;
                    a.grads.add_assign(&s.grads);
                }
            }
        }
        let mut acc = acc.ok_or_else(|| MipaError::InvalidValue("empty batch".into()))?;
        let k = 1.0 / items.len() as f64;
        acc.l_det *= k;
        acc.l_cls *= k;
        acc.l_reg *= k;
        acc.l_ma *= k;
        acc.grads.scale(F::c(k));
        Ok(acc)
    }

    /// Unimodal inference on one image.
    pub fn predict(&self, grid: &PatchGrid<f32>, score_threshold: f64, image_id: u64) -> Result<DetectionSet> {
        let enc = self.encoder.forward(&self.params, grid)?;
        let (raw, _) = self.head.forward(&self.params, &enc.last);
        Ok(decode_predictions(
            raw.view(),
            enc.last.grid_h,
            enc.last.grid_w,
            self.config.num_classes,
            score_threshold,
            image_id,
        ))
    }

    pub fn predict_many(
        &self,
        grids: &[(u64, &PatchGrid<f32>)],
        score_threshold: f64,
        exec: Execution,
    ) -> Result<Vec<DetectionSet>> {
        exec.map(grids, |(id, g)| self.predict(g, score_threshold, *id))
            .into_iter()
            .collect()
    }

    /// True when every encoder/head tensor is bitwise equal in both models.
    pub fn same_weights(&self, other: &Detector<F>) -> bool {
        self.params.iter().all(|(name, t)| match other.params.id(name) {
            Some(id) => {
                let o = other.params.get(id);
                o.shape() == t.shape() && {
                    let mut eq = true;
                    Zip::from(t).and(o).for_each(|a, b| eq &= a.to_bits_eq(b));
                    eq
                }
            }
            None => false,
        })
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<F: Real> BitsEq for F {
    fn to_bits_eq(&self, other: &Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}
