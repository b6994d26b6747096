//! Patch decomposition and mixed-modality mosaics.
//!
//! Images are `H×W×C` arrays. A [`PatchGrid`] stores the patches row-major
//! (top-left origin), each flattened in `(row, col, channel)` order. A
//! [`ModalityMask`] marks which patches come from modality f (IR, `1`) and
//! which from modality g (RGB, `0`).

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{MipaError, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    /// `n × (patch_size² · channels)`, row `i` is patch `i`.
    patches: Array2<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl<T: Clone> PatchGrid<T> {
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_h(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn image_w(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn flat(&self) -> &Array2<T> {
        &self.patches
    }

    pub fn patch_flat(&self, i: usize) -> ArrayView1<'_, T> {
        self.patches.row(i)
    }

    pub fn patch(&self, i: usize) -> ArrayView3<'_, T> {
        self.patches
            .row(i)
            .into_shape_with_order((self.patch_size, self.patch_size, self.channels))
            .expect("patch rows are contiguous")
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.patch_size == other.patch_size
            && self.channels == other.channels
    }

    pub fn describe(&self) -> String {
        format!(
            "{}x{} grid of {}px patches, {} channels",
            self.grid_h, self.grid_w, self.patch_size, self.channels
        )
    }

    /// Swap two patches in place. Used by permutation probes.
    pub fn swap_patches(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let ra = self.patches.row(a).to_owned();
        let rb = self.patches.row(b).to_owned();
        self.patches.row_mut(a).assign(&rb);
        self.patches.row_mut(b).assign(&ra);
    }
}

pub fn patchify<T: Clone>(image: ArrayView3<'_, T>, patch_size: usize) -> Result<PatchGrid<T>> {
    if patch_size == 0 {
        return Err(MipaError::InvalidValue("patch_size must be positive".into()));
    }
    let (h, w, c) = image.dim();
    if h % patch_size != 0 {
        return Err(MipaError::NotDivisible {
            axis: "height",
            size: h,
            patch_size,
        });
    }
    if w % patch_size != 0 {
        return Err(MipaError::NotDivisible {
            axis: "width",
            size: w,
            patch_size,
        });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let len = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            let tile = image.slice(s![
                gy * patch_size..(gy + 1) * patch_size,
                gx * patch_size..(gx + 1) * patch_size,
                ..
            ]);
            data.extend(tile.iter().cloned());
        }
    }
    let patches = Array2::from_shape_vec((gh * gw, len), data).expect("sized above");
    Ok(PatchGrid {
        patches,
        grid_h: gh,
        grid_w: gw,
        patch_size,
        channels: c,
    })
}

pub fn unpatchify<T: Clone + Default>(grid: &PatchGrid<T>) -> Array3<T> {
    let p = grid.patch_size;
    let mut out = Array3::from_elem((grid.image_h(), grid.image_w(), grid.channels), T::default());
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            out.slice_mut(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..])
                .assign(&grid.patch(gy * grid.grid_w + gx));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub assignment: Vec<u8>,
    pub rho: f64,
    pub m_count: usize,
    pub l_count: usize,
}

impl ModalityMask {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn from_assignment(assignment: Vec<u8>, rho: f64) -> Result<Self> {
        if assignment.iter().any(|&a| a > 1) {
            return Err(MipaError::InvalidValue("mask entries must be 0 or 1".into()));
        }
        let m_count = assignment.iter().filter(|&&a| a == 1).count();
        let l_count = assignment.len() - m_count;
        Ok(Self {
            assignment,
            rho,
            m_count,
            l_count,
        })
    }
}

/// Number of f-patches for a given ratio: `round(n·ρ)` with ties to even.
pub fn mask_count(n: usize, rho: f64) -> usize {
    (n as f64 * rho).round_ties_even() as usize
}

pub fn sample_mask(n: usize, rho: f64, rng_seed: u64) -> Result<ModalityMask> {
    if n == 0 {
        return Err(MipaError::InvalidValue("mask needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(MipaError::InvalidValue(format!("rho {rho} outside [0, 1]")));
    }
    let m = mask_count(n, rho);
    let mut rng = stream_rng(rng_seed, streams::MASK, n as u64);
    let mut assignment = vec![0u8; n];
    for i in sample(&mut rng, n, m) {
        assignment[i] = 1;
    }
    Ok(ModalityMask {
        assignment,
        rho,
        m_count: m,
        l_count: n - m,
    })
}

/// Patch-wise mosaic: patch `i` comes from `grid_f` where the mask is 1,
/// otherwise from `grid_g`.
pub fn mix<T: Clone>(
    grid_f: &PatchGrid<T>,
    grid_g: &PatchGrid<T>,
    mask: &ModalityMask,
) -> Result<PatchGrid<T>> {
    if !grid_f.same_geometry(grid_g) {
        return Err(MipaError::Geometry {
            left: grid_f.describe(),
            right: grid_g.describe(),
        });
    }
    if mask.n() != grid_f.n() {
        return Err(MipaError::Shape {
            expected: format!("mask of length {}", grid_f.n()),
            got: format!("mask of length {}", mask.n()),
        });
    }
    let mut out = grid_g.clone();
    for (i, &a) in mask.assignment.iter().enumerate() {
        if a == 1 {
            out.patches.row_mut(i).assign(&grid_f.patches.row(i));
        }
    }
    Ok(out)
}

/// Row-major reshape of the mask into the `grid_h × grid_w` modality map.
pub fn modality_map_from_mask(
    mask: &ModalityMask,
    grid_h: usize,
    grid_w: usize,
) -> Result<Array2<u8>> {
    if mask.n() != grid_h * grid_w {
        return Err(MipaError::Shape {
            expected: format!("{grid_h}x{grid_w} = {} entries", grid_h * grid_w),
            got: format!("{} entries", mask.n()),
        });
    }
    Ok(Array2::from_shape_vec((grid_h, grid_w), mask.assignment.clone()).expect("checked"))
}
