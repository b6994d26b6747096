//! Datasets prepared for training: both modalities patchified once, plus
//! per-token targets.

use crate::data::{generate_dataset, load_coco_pairs, PairedSample};
use crate::detect::{assign_targets, DetectionSet, Targets};
use crate::error::Result;
use crate::exec::Execution;
use crate::mosaic::{patchify, PatchGrid};

use super::config::DatasetConfig;

/// Test scenes are drawn from this index onwards so they never overlap the
/// training scenes.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: u64,
    /// IR.
    pub grid_f: PatchGrid<f32>,
    /// RGB.
    pub grid_g: PatchGrid<f32>,
    pub gt: DetectionSet,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub samples: Vec<PreparedSample>,
    pub num_classes: usize,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn gts(&self) -> Vec<DetectionSet> {
        self.samples.iter().map(|s| s.gt.clone()).collect()
    }

    /// First `n` samples (or all).
    pub fn head(&self, n: Option<usize>) -> PreparedSet {
        let n = n.unwrap_or(self.len()).min(self.len());
        PreparedSet {
            samples: self.samples[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

pub fn prepare(
    samples: Vec<PairedSample>,
    patch_size: usize,
    final_grid: (usize, usize),
    num_classes: usize,
    exec: Execution,
) -> Result<PreparedSet> {
    let prepared: Vec<Result<PreparedSample>> = exec.map(&samples, |s| {
        let mut gt = s.gt.clone();
        gt.image_id = s.scene_id;
        Ok(PreparedSample {
            id: s.scene_id,
            grid_f: patchify(s.image_f.view(), patch_size)?,
            grid_g: patchify(s.image_g.view(), patch_size)?,
            targets: assign_targets(&gt, final_grid.0, final_grid.1, num_classes),
            gt,
        })
    });
    Ok(PreparedSet {
        samples: prepared.into_iter().collect::<Result<_>>()?,
        num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw pairs of one split.
pub fn load_pairs(ds: &DatasetConfig, split: Split, patch_size: usize, exec: Execution) -> Result<Vec<PairedSample>> {
    match ds {
        DatasetConfig::Synthetic {
            spec,
            train_size,
            test_size,
        } => Ok(match split {
            Split::Train => generate_dataset(spec, 0, *train_size, exec),
            Split::Test => generate_dataset(spec, TEST_INDEX_OFFSET, *test_size, exec),
        }),
        DatasetConfig::Coco {
            root,
            train_annotations,
            test_annotations,
            pairing,
            image_size,
            ..
        } => {
            let ann = match split {
                Split::Train => train_annotations,
                Split::Test => test_annotations,
            };
            let mut stream = load_coco_pairs(root, ann, pairing, *image_size, patch_size)?;
            let out = stream.by_ref().collect::<Result<Vec<_>>>()?;
            let rep = stream.report();
            if rep.skipped > 0 {
                log::warn!("{}: skipped {} pairs with missing files", ann.display(), rep.skipped);
            }
            Ok(out)
        }
    }
}

pub fn prepare_split(
    ds: &DatasetConfig,
    split: Split,
    patch_size: usize,
    final_grid: (usize, usize),
    exec: Execution,
) -> Result<PreparedSet> {
    let pairs = load_pairs(ds, split, patch_size, exec)?;
    prepare(pairs, patch_size, final_grid, ds.num_classes(), exec)
}

pub fn prepare_dataset(
    ds: &DatasetConfig,
    patch_size: usize,
    final_grid: (usize, usize),
    exec: Execution,
) -> Result<(PreparedSet, PreparedSet)> {
    Ok((
        prepare_split(ds, Split::Train, patch_size, final_grid, exec)?,
        prepare_split(ds, Split::Test, patch_size, final_grid, exec)?,
    ))
}
