//! Dense row-major f64 tensors.
//!
//! Values are immutable after construction as far as the public API is
//! concerned; all arithmetic goes through the tape so gradients can be
//! recorded. Construction validates the shape/data agreement and finiteness.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::Result;

/// A dense tensor: `shape` dimension sizes and row-major `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()` and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(Vec::new(), vec![v])
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[f64]) -> Result<Self> {
        Tensor::new(vec![data.len()], data.to_vec())
    }

    /// 2-D tensor from rows × cols row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Crate-internal mutation hook for optimizer steps; callers re-validate
    /// finiteness after writing.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// The single value of a scalar or 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "dims2",
                detail: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op })
        }
    }

    /// Maximum absolute elementwise difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-level equality (exact f64 representation match).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(
            Tensor::vector(&[1.0, f64::NAN]).unwrap_err(),
            CoreError::NonFinite { op: "Tensor::new" }
        );
        assert!(Tensor::vector(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25).unwrap();
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = Tensor::vector(&[0.0]).unwrap();
        let b = Tensor::vector(&[-0.0]).unwrap();
        assert!(!a.bits_eq(&b));
        assert!(a.bits_eq(&a.clone()));
    }
}
