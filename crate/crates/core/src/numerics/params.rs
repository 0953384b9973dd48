use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable matrix and its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Every trainable parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Adds a `rows x cols` matrix drawn uniformly from `±sqrt(6 / (rows + cols))`.
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data).expect("sized buffer"))
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(0.0);
        }
    }

    /// Copies an accumulated gradient buffer into the parameters' `grad` fields.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.as_mut_slice().copy_from_slice(g.as_slice());
        }
    }
}

/// A gradient buffer shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients(pub(crate) Vec<Matrix>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(
            store
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        )
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.0[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.0[id.0].add_assign(g);
    }

    pub fn add_all(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale_in_place(s);
        }
    }
}
