use crate::autodiff::{Tape, Tensor};
use crate::matrix::Matrix;
use std::ops::Index;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered storage of every trainable matrix of a model. Order is the
/// registration order and is what the optimizer and checkpoints iterate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Records every parameter as an untracked constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        )
    }
}

/// Parameters of a store as they appear on one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Tensor>);

impl Bound {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self(tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    /// Gradients after `tape.backward`, zero for parameters the loss does
    /// not reach.
    pub fn grads(&self, tape: &Tape) -> Vec<Matrix> {
        self.0
            .iter()
            .map(|&t| {
                tape.grad(t).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(t);
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }
}
