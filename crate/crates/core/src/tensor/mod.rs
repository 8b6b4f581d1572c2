//! Dense channels-first tensors with a tape-based reverse-mode graph.
//!
//! Tensors are rank 1 to 4 and always hold `f64`. Differentiation happens on
//! a [`Graph`]: every operation appends a node, and [`Graph::backward`] walks
//! the nodes in reverse construction order.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

pub use graph::{Graph, Var};
pub use gradcheck::grad_check;

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("rank must be 1..=4, got {}", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("valid shape")
    }

    /// Values `0, 1, 2, ...` in row-major order.
    pub fn arange(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(|i| i as f64).collect()).expect("valid shape")
    }

    /// Marks the tensor as a trainable leaf and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator, allocating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return shape_err(format!(
                "gradient of length {} for tensor of length {}",
                delta.len(),
                self.data.len()
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    /// Splits into `(params, grad)` so optimizers can update in place.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut Vec<f64>>) {
        (&mut self.data, self.grad.as_mut())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Interprets the trailing three extents as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [1, c, h, w] => Ok((*c, *h, *w)),
            s => shape_err(format!("expected [C,H,W], got {s:?}")),
        }
    }

    /// Value at `[c, y, x]` of a channels-first raster.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw().expect("rank-3 tensor");
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    /// Drops any gradient state, returning a plain value tensor.
    pub fn detached(&self) -> Self {
        Self::new(&self.shape, self.data.clone()).expect("same shape")
    }
}
