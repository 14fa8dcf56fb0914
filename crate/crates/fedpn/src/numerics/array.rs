//! Dense row-major arrays of 64-bit reals.
//!
//! Values are immutable once built into a graph; the struct itself offers
//! plain constructors and elementwise helpers used throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} entries, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DenseArray {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        DenseArray {
            shape,
            data: vec![value; n],
        }
    }

    /// A 1x1 array holding a single value.
    pub fn scalar(value: f64) -> Self {
        DenseArray {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row vector `1 x n`.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        DenseArray {
            shape: vec![1, n],
            data: values,
        }
    }

    /// Column vector `n x 1`.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        DenseArray {
            shape: vec![n, 1],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a 1x1 array.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Rows of a 2-d array (scalars and vectors count via their shape).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a 2-d array.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseArray {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Componentwise a + s*b; shapes must match exactly.
    pub fn axpy(&mut self, s: f64, other: &DenseArray) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }
}
