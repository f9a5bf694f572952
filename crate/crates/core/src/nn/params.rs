use ndarray::{ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to one named array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Flat, ordered collection of every trainable array in a model.
///
/// Layers keep [`ParamId`]s into the store, so the same layer graph can be
/// evaluated against `f32` and `f64` copies of the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::zero(); n])
    }

    /// Centered uniform in `[-bound, bound]`, drawn in `f64` so that `f32` and
    /// `f64` stores built from the same seed agree up to rounding.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::c(rng.random_range(-bound..=bound))).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].data
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.slice(id))
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, F> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &e.data).expect("rank-2 parameter")
    }

    pub fn tensor3(&self, id: ParamId) -> ArrayView3<'_, F> {
        let e = &self.entries[id.0];
        ArrayView3::from_shape((e.shape[0], e.shape[1], e.shape[2]), &e.data).expect("rank-3 parameter")
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| G::c(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(
                "parameter load",
                format!("{} arrays vs {}", self.entries.len(), other.entries.len()),
            ));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::shape(
                    "parameter load",
                    format!("{} {:?} vs {} {:?}", dst.name, dst.shape, src.name, src.shape),
                ));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Gradient buffers mirroring a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            shapes: store.entries.iter().map(|e| e.shape.clone()).collect(),
            data: store.entries.iter().map(|e| vec![F::zero(); e.data.len()]).collect(),
        }
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        &self.data[id.0]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.data[id.0]
    }

    pub fn arrays(&self) -> &[Vec<F>] {
        &self.data
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(self.data[id.0].as_mut_slice())
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let shape = &self.shapes[id.0];
        ArrayViewMut2::from_shape((shape[0], shape[1]), &mut self.data[id.0]).expect("rank-2 gradient")
    }

    pub fn tensor3_mut(&mut self, id: ParamId) -> ArrayViewMut3<'_, F> {
        let shape = &self.shapes[id.0];
        ArrayViewMut3::from_shape((shape[0], shape[1], shape[2]), &mut self.data[id.0]).expect("rank-3 gradient")
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for a in &mut self.data {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Index of the first array holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|a| a.iter().any(|v| !v.is_finite()))
    }
}
