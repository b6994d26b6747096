use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{gelu_backward_with_tanh, gelu_with_tanh, LayerNorm, LayerNormCache, Linear};
use super::params::{Init, ParamStore};
use crate::real::Real;

/// Global multi-head self-attention over a token sequence.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    /// Row-stochastic attention weights, one `T×T` matrix per head.
    pub probs: Vec<Array2<F>>,
    merged: Array2<F>,
}

impl Attention {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        weight_init: Init,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, weight_init, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, out_init, rng);
        Self {
            qkv,
            proj,
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<'_, F>,
    ) -> (Array2<F>, AttentionCache<F>) {
        let t = x.nrows();
        let dh = self.head_dim();
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(p, x);
        let mut merged = Array2::zeros((t, self.dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., self.dim + h * dh..self.dim + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            for mut row in scores.rows_mut() {
                let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| ((v - max) * scale).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            merged
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
        let y = self.proj.forward(p, merged.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &AttentionCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let dh = self.head_dim();
        let d = self.dim;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let dmerged = self.proj.backward(p, g, cache.merged.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let pr = &cache.probs[h];
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = pr.t().dot(&dout);
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let row_dot = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = pr * &(&dp - &row_dot);
            ds.mapv_inplace(|v| v * scale);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        self.qkv.backward(p, g, cache.x.view(), dqkv.view())
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    pub attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    gu: Array2<F>,
    t: Array2<F>,
}

impl Block {
    /// With `identity` set, the attention and MLP output projections start at
    /// zero so the block is exactly the identity map.
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        identity: bool,
        rng: &mut R,
    ) -> Self {
        let w = Init::Normal(0.02);
        let out = if identity { Init::Zeros } else { w };
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), dim, rng);
        let attn = Attention::new(store, &format!("{name}.attn"), dim, heads, w, out, rng);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), dim, rng);
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, w, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, out, rng);
        Self {
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        }
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<'_, F>,
    ) -> (Array2<F>, BlockCache<F>) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, h1.view());
        let x2 = &x + &a;
        let (h2, ln2) = self.ln2.forward(p, x2.view());
        let u = self.fc1.forward(p, h2.view());
        let (gu, t) = gelu_with_tanh(&u);
        let m = self.fc2.forward(p, gu.view());
        let y = x2 + m;
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                u,
                gu,
                t,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &BlockCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let dgu = self.fc2.backward(p, g, cache.gu.view(), dy);
        let du = gelu_backward_with_tanh(&cache.u, &cache.t, dgu.view());
        let dh2 = self.fc1.backward(p, g, cache.h2.view(), du.view());
        let mut dx2 = self.ln2.backward(p, g, &cache.ln2, dh2.view());
        dx2 += &dy;
        let dh1 = self.attn.backward(p, g, &cache.attn, dx2.view());
        let mut dx = self.ln1.backward(p, g, &cache.ln1, dh1.view());
        dx += &dx2;
        dx
    }
}
