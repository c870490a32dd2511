//! Dense row-major tensors.

use crate::error::Error;
use crate::scalar::Scalar;

/// A dense multi-dimensional array of floats, row-major. A scalar is
/// the rank-0 tensor (empty shape, one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, Error> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expected} values, got {}", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, values: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], values: vec![v] }
    }

    pub fn from_rows(rows: usize, cols: usize, values: Vec<S>) -> Result<Self, Error> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Number of rows when viewed as a 2-d array ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, Error> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }
}

pub(crate) fn debug_check_finite<S: Scalar>(op: &'static str, values: &[S]) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "{op}: produced a non-finite value"
    );
    let _ = (op, values);
}
