use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named tensors addressed by [`ParamId`]. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let tensor = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                ArrayD::from_shape_simple_fn(IxDyn(shape), || F::c(dist.sample(rng)))
            }
        };
        self.insert(name, tensor)
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<F>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is 2-D")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality()
            .expect("parameter is 2-D")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is 1-D")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality()
            .expect("parameter is 1-D")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<F>> {
        self.tensors.iter_mut()
    }

    /// Scalar at a flat position across all tensors (in insertion order).
    pub fn flat_get(&self, mut index: usize) -> F {
        for t in &self.tensors {
            if index < t.len() {
                return *t.iter().nth(index).expect("in range");
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, value: F) {
        for t in &mut self.tensors {
            if index < t.len() {
                *t.iter_mut().nth(index).expect("in range") = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Flat index range occupied by the tensor `id`.
    pub fn flat_range(&self, id: ParamId) -> std::ops::Range<usize> {
        let start: usize = self.tensors[..id.0].iter().map(|t| t.len()).sum();
        start..start + self.tensors[id.0].len()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            match (a.as_slice_mut(), b.as_slice()) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(x, y)| *x += *y),
                _ => *a += b,
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::c(v.as_f64())))
                .collect(),
        }
    }

    /// Copy every tensor whose name also exists in `other`.
    pub fn copy_matching(&mut self, other: &Self) -> usize {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(i) = other.names.iter().position(|n| n == name) {
                if other.tensors[i].shape() == t.shape() {
                    t.assign(&other.tensors[i]);
                    copied += 1;
                }
            }
        }
        copied
    }
}
