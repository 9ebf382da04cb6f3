use std::fmt;

use serde::{Deserialize, Serialize};

/// Row/column extent of a dense tensor. Vectors are stored as columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Dense row-major `f64` storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length does not match shape {shape}"
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(Shape::SCALAR, vec![v])
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(Shape::new(data.len(), 1), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(Shape::new(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![0.0; shape.len()])
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor::new(shape, vec![v; shape.len()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    /// Value of a 1x1 tensor.
    ///
    /// Panics if the tensor is not a scalar.
    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.cols + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
