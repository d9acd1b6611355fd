use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix dimensions. Vectors are `n × 1` or `1 × n`, scalars `1 × 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Dense f64 matrix value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{} needs {} values, got {}", shape, shape.len(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor {
            shape: Shape::new(rows, cols),
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Tensor::from_vec(points.len(), 3, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[row * c..(row + 1) * c]
    }

    /// Rows of a `n × 3` tensor as points.
    pub fn to_points(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.shape.cols, 3, "to_points needs 3 columns");
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape, Shape::SCALAR, "item() on non-scalar");
        self.data[0]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{} -> [{rows}, {cols}]", self.shape),
            });
        }
        self.shape = Shape::new(rows, cols);
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
