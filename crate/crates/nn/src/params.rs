use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Graph leaves created for every tensor of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Puts every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
                .collect(),
        )
    }

    /// Gradients of the last backward pass, zero where none flowed.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|((_, t), &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Named tensors with `prefix/` prepended, for checkpoint containers.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|(n, t)| (format!("{prefix}/{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every tensor from `prefix/<name>` entries of `source`.
    pub fn import(&mut self, prefix: &str, source: &[(String, Tensor<T>)]) -> Result<(), NnError> {
        for (name, t) in self.entries.iter_mut() {
            let key = format!("{prefix}/{name}");
            let found = source
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| NnError::MissingParam(key.clone()))?;
            if found.1.shape() != t.shape() {
                return Err(NnError::Shape(format!(
                    "{key}: stored {:?}, expected {:?}",
                    found.1.shape(),
                    t.shape()
                )));
            }
            *t = found.1.clone();
        }
        Ok(())
    }
}

/// Tensor of i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<T: Scalar>(shape: [usize; 4], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}
