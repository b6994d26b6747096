//! Two-stage patch-transformer encoder shared by both modalities.
//!
//! Patch embedding (linear projection plus separable row/column positional
//! tables) feeds `stage_depths[0]` pre-norm blocks whose output is the
//! stage-1 tap used by the modality classifier. An optional 2×2 patch merge
//! halves the grid before each later stage.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipaError, Result};
use crate::mosaic::PatchGrid;
use crate::nn::{Block, BlockCache, Init, LayerNorm, LayerNormCache, Linear, ParamId, ParamStore};
use crate::real::Real;

/// Omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub downsample_between_stages: bool,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            stage_depths: vec![2, 2],
            num_heads: 4,
            mlp_ratio: 2.0,
            downsample_between_stages: true,
            in_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MipaError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("patch_size, embed_dim and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.stage_depths.is_empty() || self.stage_depths.iter().any(|&d| d == 0) {
            return bad("stage_depths must be non-empty with every stage >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Token grid of the last stage for a given patch grid.
    pub fn final_grid(&self, grid_h: usize, grid_w: usize) -> (usize, usize) {
        let merges = if self.downsample_between_stages {
            self.stage_depths.len() - 1
        } else {
            0
        };
        (grid_h >> merges, grid_w >> merges)
    }
}

/// Token sequence laid out row-major over a `grid_h × grid_w` spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap<F> {
    pub tokens: Array2<F>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stage_index: usize,
}

impl<F: Real> TokenMap<F> {
    pub fn new(tokens: Array2<F>, grid_h: usize, grid_w: usize, stage_index: usize) -> Self {
        assert_eq!(tokens.nrows(), grid_h * grid_w);
        Self {
            tokens,
            grid_h,
            grid_w,
            stage_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct PatchMerge {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    fn gather<F: Real>(x: ArrayView2<'_, F>, gh: usize, gw: usize) -> Array2<F> {
        let d = x.ncols();
        let (oh, ow) = (gh / 2, gw / 2);
        let mut out = Array2::zeros((oh * ow, 4 * d));
        for i in 0..oh {
            for j in 0..ow {
                let mut row = out.row_mut(i * ow + j);
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let src = (2 * i + dy) * gw + 2 * j + dx;
                    row.slice_mut(s![k * d..(k + 1) * d]).assign(&x.row(src));
                }
            }
        }
        out
    }

    fn scatter<F: Real>(dg: ArrayView2<'_, F>, gh: usize, gw: usize) -> Array2<F> {
        let d = dg.ncols() / 4;
        let ow = gw / 2;
        let mut dx = Array2::zeros((gh * gw, d));
        for (o, row) in dg.rows().into_iter().enumerate() {
            let (i, j) = (o / ow, o % ow);
            for (k, (dy, ddx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let dst = (2 * i + dy) * gw + 2 * j + ddx;
                dx.row_mut(dst).assign(&row.slice(s![k * d..(k + 1) * d]));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    embed: Linear,
    pos_row: ParamId,
    pos_col: ParamId,
    stages: Vec<Vec<Block>>,
    merges: Vec<Option<PatchMerge>>,
}

#[derive(Debug, Clone)]
struct MergeCache<F> {
    norm: LayerNormCache<F>,
    normed: Array2<F>,
    gh: usize,
    gw: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    patches: Array2<F>,
    blocks: Vec<Vec<BlockCache<F>>>,
    merges: Vec<Option<MergeCache<F>>>,
}

impl<F> EncoderCache<F> {
    /// Attention caches of every block, in execution order.
    pub fn block_caches(&self) -> impl Iterator<Item = &BlockCache<F>> {
        self.blocks.iter().flatten()
    }
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct Encoded<F> {
    pub stage1: TokenMap<F>,
    pub last: TokenMap<F>,
    pub cache: EncoderCache<F>,
}

impl Encoder {
    /// Registers all encoder parameters under `encoder.*`. With `identity`
    /// the block output projections and positional tables start at zero.
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        config: &EncoderConfig,
        grid_h: usize,
        grid_w: usize,
        identity: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let n_merges = if config.downsample_between_stages {
            config.stage_depths.len() - 1
        } else {
            0
        };
        let factor = 1usize << n_merges;
        if grid_h % factor != 0 || grid_w % factor != 0 {
            return Err(MipaError::Config(format!(
                "patch grid {grid_h}x{grid_w} cannot be merged {n_merges} times"
            )));
        }
        let patch_len = config.patch_size * config.patch_size * config.in_channels;
        let w = Init::Normal(0.02);
        let pos_init = if identity { Init::Zeros } else { w };
        let embed = Linear::new(store, "encoder.embed", patch_len, d, w, rng);
        let pos_row = store.add("encoder.row_pos", &[grid_h, d], pos_init, rng);
        let pos_col = store.add("encoder.col_pos", &[grid_w, d], pos_init, rng);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (si, &depth) in config.stage_depths.iter().enumerate() {
            if si > 0 && config.downsample_between_stages {
                let name = format!("encoder.merge{si}");
                let norm = LayerNorm::new(store, &format!("{name}.norm"), 4 * d, rng);
                let reduce = Linear::new(store, &format!("{name}.reduce"), 4 * d, d, w, rng);
                merges.push(Some(PatchMerge { norm, reduce }));
            } else {
                merges.push(None);
            }
            let blocks = (0..depth)
                .map(|bi| {
                    Block::new(
                        store,
                        &format!("encoder.stage{}.block{bi}", si + 1),
                        d,
                        config.num_heads,
                        config.mlp_ratio,
                        identity,
                        rng,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            grid_h,
            grid_w,
            embed,
            pos_row,
            pos_col,
            stages,
            merges,
        })
    }

    pub fn patch_matrix<F: Real>(&self, grid: &PatchGrid<f32>) -> Result<Array2<F>> {
        let expect = self.config.patch_size * self.config.patch_size * self.config.in_channels;
        if grid.patch_len() != expect || grid.grid_h != self.grid_h || grid.grid_w != self.grid_w {
            return Err(MipaError::Shape {
                expected: format!(
                    "{}x{} grid of {expect}-value patches",
                    self.grid_h, self.grid_w
                ),
                got: format!("{}x{} grid of {}-value patches", grid.grid_h, grid.grid_w, grid.patch_len()),
            });
        }
        Ok(grid.flat().mapv(|v| F::c(v as f64)))
    }

    /// Linear projection of the flattened patches plus the 2-D positional
    /// term; returns a stage-0 token map.
    pub fn embed_patches<F: Real>(&self, p: &ParamStore<F>, grid: &PatchGrid<f32>) -> Result<TokenMap<F>> {
        let x = self.patch_matrix(grid)?;
        Ok(self.embed_matrix(p, x.view()))
    }

    fn embed_matrix<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<'_, F>) -> TokenMap<F> {
        let mut t = self.embed.forward(p, x);
        let (rows, cols) = (p.mat(self.pos_row), p.mat(self.pos_col));
        for (i, mut tok) in t.rows_mut().into_iter().enumerate() {
            tok += &rows.row(i / self.grid_w);
            tok += &cols.row(i % self.grid_w);
        }
        TokenMap::new(t, self.grid_h, self.grid_w, 0)
    }

    /// Runs all stages. `stage1` is the output of the first stage.
    pub fn encode<F: Real>(&self, p: &ParamStore<F>, tokens: &TokenMap<F>) -> Result<Encoded<F>> {
        self.encode_inner(p, tokens, Array2::zeros((0, 0)))
    }

    /// Embedding followed by [`Encoder::encode`], keeping what backward needs.
    pub fn forward<F: Real>(&self, p: &ParamStore<F>, grid: &PatchGrid<f32>) -> Result<Encoded<F>> {
        let x = self.patch_matrix(grid)?;
        let tokens = self.embed_matrix(p, x.view());
        self.encode_inner(p, &tokens, x)
    }

    fn encode_inner<F: Real>(
        &self,
        p: &ParamStore<F>,
        tokens: &TokenMap<F>,
        patches: Array2<F>,
    ) -> Result<Encoded<F>> {
        let mut x = tokens.tokens.clone();
        let (mut gh, mut gw) = (tokens.grid_h, tokens.grid_w);
        let mut block_caches = Vec::with_capacity(self.stages.len());
        let mut merge_caches = Vec::with_capacity(self.stages.len());
        let mut stage1 = None;
        for (si, (blocks, merge)) in self.stages.iter().zip(&self.merges).enumerate() {
            if let Some(m) = merge {
                let gathered = PatchMerge::gather(x.view(), gh, gw);
                let (normed, norm) = m.norm.forward(p, gathered.view());
                x = m.reduce.forward(p, normed.view());
                merge_caches.push(Some(MergeCache {
                    norm,
                    normed,
                    gh,
                    gw,
                }));
                gh /= 2;
                gw /= 2;
            } else {
                merge_caches.push(None);
            }
            let mut caches = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (y, c) = b.forward(p, x.view());
                x = y;
                caches.push(c);
            }
            block_caches.push(caches);
            if si == 0 {
                stage1 = Some(TokenMap::new(x.clone(), gh, gw, 1));
            }
        }
        let last = TokenMap::new(x, gh, gw, self.stages.len());
        if !last.is_finite() {
            return Err(MipaError::NonFinite {
                what: "encoder activations".into(),
                step: 0,
            });
        }
        Ok(Encoded {
            stage1: stage1.expect("at least one stage"),
            last,
            cache: EncoderCache {
                patches,
                blocks: block_caches,
                merges: merge_caches,
            },
        })
    }

    /// Backpropagates gradients arriving at the final tokens and, optionally,
    /// at the stage-1 tap.
    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &EncoderCache<F>,
        d_stage1: Option<&Array2<F>>,
        d_last: &Array2<F>,
    ) {
        let mut dx = d_last.clone();
        for si in (0..self.stages.len()).rev() {
            if si == 0 {
                if let Some(d1) = d_stage1 {
                    dx += d1;
                }
            }
            for (b, c) in self.stages[si].iter().zip(&cache.blocks[si]).rev() {
                dx = b.backward(p, g, c, dx.view());
            }
            if let (Some(m), Some(mc)) = (&self.merges[si], &cache.merges[si]) {
                let dn = m.reduce.backward(p, g, mc.normed.view(), dx.view());
                let dgath = m.norm.backward(p, g, &mc.norm, dn.view());
                dx = PatchMerge::scatter(dgath.view(), mc.gh, mc.gw);
            }
        }
        // Positional tables and patch projection.
        {
            let mut grow = g.mat_mut(self.pos_row);
            for (i, tok) in dx.rows().into_iter().enumerate() {
                let mut r = grow.row_mut(i / self.grid_w);
                r += &tok;
            }
        }
        {
            let mut gcol = g.mat_mut(self.pos_col);
            for (i, tok) in dx.rows().into_iter().enumerate() {
                let mut r = gcol.row_mut(i % self.grid_w);
                r += &tok;
            }
        }
        self.embed.backward(p, g, cache.patches.view(), dx.view());
    }
}
