//! Dense tensors, a reverse-mode autodiff tape, parameter storage and AdamW.
//!
//! Values live in [`Tensor`]; computation that needs gradients is recorded on
//! a [`Tape`] as [`Var`] handles. Trainable weights live in a [`ParamStore`]
//! and enter a tape through [`Tape::param`].

mod optim;
mod rng;
mod scalar;
mod store;
mod tape;
#[cfg(test)]
mod tests;

pub use optim::{AdamW, AdamWConfig};
pub use rng::{normal_tensor, seeded, split_seed, uniform, Rng};
pub use scalar::{sc, MatView, Scalar};
pub use store::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{dim_err, Error, Result};

/// A contiguous row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!("shape {:?} holds {} elements but buffer has {}", shape, numel, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and docs.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::from_f64_lossy(v))).collect();
        Tensor { shape: vec![rows.len(), cols], data }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => dim_err(format!("expected a 2-D tensor, got shape {other:?}")),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        // `v·0` is NaN exactly when `v` is not finite.
        let mut lanes = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v * T::zero();
            }
        }
        lanes.iter().chain(tail).all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Element at a 2-D index.
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs()).fold(0.0, f64::max)
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return dim_err(format!("matmul: {:?} × {:?}", self.shape, other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm_raw(
            &self.data,
            MatView::dense(m, k),
            &other.data,
            MatView::dense(k, n),
            &mut out,
            MatView::dense(m, n),
            T::zero(),
        );
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        Ok(Self::from_fn(&[n, m], |i| self.data[(i % m) * n + i / m]))
    }
}
