use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use crate::real::Real;

/// `y = x·W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), &[d_in, d_out], init, rng);
        let b = store.add(&format!("{name}.bias"), &[d_out], Init::Zeros, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        x: ArrayView2<'_, F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.mat_mut(self.w));
        g.vec_mut(self.b).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        dy.dot(&p.mat(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<'_, F>,
    ) -> (Array2<F>, LayerNormCache<F>) {
        let n = x.ncols();
        let d = F::c(n as f64);
        let eps = F::c(LN_EPS);
        let gamma = p.vec(self.gamma);
        let beta = p.vec(self.beta);
        let (gamma, beta) = (gamma.as_slice().expect("contiguous"), beta.as_slice().expect("contiguous"));
        let mut xhat = x.as_standard_layout().into_owned();
        let mut y = Array2::zeros(x.raw_dim());
        let mut rstd = Array1::zeros(x.nrows());
        let rows = xhat.as_slice_mut().expect("standard layout").chunks_exact_mut(n);
        let outs = y.as_slice_mut().expect("standard layout").chunks_exact_mut(n);
        for ((row, out), r) in rows.zip(outs).zip(rstd.iter_mut()) {
            let mean = row.iter().copied().sum::<F>() / d;
            let mut var = F::zero();
            for v in row.iter_mut() {
                *v -= mean;
                var += *v * *v;
            }
            *r = F::one() / (var / d + eps).sqrt();
            for ((v, o), (&gm, &bt)) in row.iter_mut().zip(out.iter_mut()).zip(gamma.iter().zip(beta)) {
                *v *= *r;
                *o = *v * gm + bt;
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let n = dy.ncols();
        let d = F::c(n as f64);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        {
            let mut dg = g.vec_mut(self.gamma);
            let dg = dg.as_slice_mut().expect("contiguous");
            for (drow, xrow) in dys.chunks_exact(n).zip(xh.chunks_exact(n)) {
                for ((acc, &a), &b) in dg.iter_mut().zip(drow).zip(xrow) {
                    *acc += a * b;
                }
            }
        }
        g.vec_mut(self.beta).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        let gamma = p.vec(self.gamma);
        let gamma = gamma.as_slice().expect("contiguous");
        let mut dx = Array2::zeros(dy.raw_dim());
        let outs = dx.as_slice_mut().expect("standard layout").chunks_exact_mut(n);
        for (((out, drow), xrow), &r) in outs.zip(dys.chunks_exact(n)).zip(xh.chunks_exact(n)).zip(cache.rstd.iter()) {
            let (mut mean_d, mut mean_dx) = (F::zero(), F::zero());
            for ((o, &a), (&gm, &h)) in out.iter_mut().zip(drow).zip(gamma.iter().zip(xrow)) {
                *o = a * gm;
                mean_d += *o;
                mean_dx += *o * h;
            }
            mean_d /= d;
            mean_dx /= d;
            for (o, &h) in out.iter_mut().zip(xrow) {
                *o = r * (*o - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`. Absolute error stays at a few ulps, which
/// is all GELU needs since it only uses `1 + tanh`.
fn tanh_via_exp<F: Real>(y: F) -> F {
    let two = F::c(2.0);
    F::one() - two / ((two * y).exp() + F::one())
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    gelu_with_tanh(x).0
}

/// GELU plus the inner `tanh` values, kept for the backward pass.
pub fn gelu_with_tanh<F: Real>(x: &Array2<F>) -> (Array2<F>, Array2<F>) {
    let (c, a, half) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5));
    let t = x.mapv(|v| tanh_via_exp(c * (v + a * v * v * v)));
    let mut y = t.clone();
    Zip::from(&mut y).and(x).for_each(|y, &v| *y = half * v * (F::one() + *y));
    (y, t)
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
    let (_, t) = gelu_with_tanh(x);
    gelu_backward_with_tanh(x, &t, dy)
}

pub fn gelu_backward_with_tanh<F: Real>(x: &Array2<F>, t: &Array2<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
    let (c, a, half, three) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5), F::c(3.0));
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(x).and(t).for_each(|d, &v, &t| {
        let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
        *d *= half * (F::one() + t) + half * v * dt;
    });
    out
}
