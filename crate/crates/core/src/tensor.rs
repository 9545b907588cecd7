//! Dense row-major tensors over 64-bit floats.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Error raised when tensor shapes do not conform to an operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeError(pub String);

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shape error: {}", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ShapeError {}

/// A dense tensor: positive dimensions, values in row-major order, and an
/// optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, ShapeError> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(ShapeError(format!("zero dimension in shape {:?}", shape)));
        }
        if values.len() != expect {
            return Err(ShapeError(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same values under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        let expect: usize = shape.iter().product();
        if expect != self.numel() {
            return Err(ShapeError(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor { shape, values: self.values.clone(), grad: None })
    }

    /// Ensures a zeroed gradient buffer exists and returns it mutably.
    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.numel()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub(crate) fn same_shape(a: &[usize], b: &[usize]) -> bool {
    a == b
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0]).unwrap_err();
        assert!(err.0.contains("expects 4"), "{err}");
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let t = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(vec![1, 4]).unwrap();
        assert_eq!(r.values, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
