use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor2};
use crate::math;
use crate::rng::normal;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor2,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named trainable tensors of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2, decay: bool) -> ParamId {
        self.params.push(ParamTensor {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix with entries `N(0, std²)`.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let t = Tensor2::from_fn(rows, cols, |_, _| std * normal(rng));
        self.add(name, t, true)
    }

    /// Fan-in scaled weight matrix.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_normal(name, rows, cols, 1.0 / math::sqrt(fan_in as f64), rng)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2::zeros(rows, cols), false)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor2::from_fn(rows, cols, |_, _| v), false)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Copies values from `other`, which must hold the same names and shapes
    /// in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.params.len() != self.params.len() {
            return Err(NnError::Shape {
                op: "load parameters",
                left: (self.params.len(), 0),
                right: (other.params.len(), 0),
            });
        }
        for (mine, theirs) in self.params.iter().zip(&other.params) {
            if mine.name != theirs.name {
                return Err(NnError::UnknownParam(theirs.name.to_string()));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(NnError::Shape {
                    op: "load parameters",
                    left: mine.value.shape(),
                    right: theirs.value.shape(),
                });
            }
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    data: Vec<Tensor2>,
}

impl Grads {
    pub fn zeros_like(ps: &ParamStore) -> Self {
        Self {
            data: ps
                .params
                .iter()
                .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.data[id.0]
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.data
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.data {
            t.scale(s);
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.data {
            t.data_mut().fill(0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(Tensor2::sum_sq).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(Tensor2::is_finite)
    }
}
