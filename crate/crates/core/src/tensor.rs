//! Dense row-major tensors with a precision tag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::half::round_to_half;

/// Storage precision. Both variants hold `f64` internally; `HalfEmulated`
/// rounds every written element through binary16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    #[serde(alias = "half")]
    HalfEmulated,
}

impl Precision {
    /// Logical bytes per element: 4 for full precision, 2 for half.
    pub fn bytes_per_element(self) -> u64 {
        match self {
            Precision::Full => 4,
            Precision::HalfEmulated => 2,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Full => x,
            Precision::HalfEmulated => round_to_half(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    precision: Precision,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        let mut t = Tensor {
            shape,
            precision,
            data,
        };
        t.round_all();
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            precision,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            precision: Precision::Full,
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data, Precision::Full).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> u64 {
        self.data.len() as u64 * self.precision.bytes_per_element()
    }

    /// Rows and columns of a 2-D tensor. A 1-D tensor is treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.numel() / c, c)
            }
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of squares, accumulated sequentially in element order.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
    }

    pub fn cast(&self, precision: Precision) -> Tensor {
        let mut t = Tensor {
            shape: self.shape.clone(),
            precision,
            data: self.data.clone(),
        };
        t.round_all();
        t
    }

    /// Apply `f` to every element, rounding each result to this tensor's
    /// precision.
    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        let p = self.precision;
        for x in &mut self.data {
            *x = p.round(f(*x));
        }
    }

    /// Elementwise `self[i] = f(self[i], other[i])` with rounding on write.
    pub fn zip_in_place(&mut self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        let p = self.precision;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = p.round(f(*x, y));
        }
    }

    /// Overwrite the contents, rounding to this tensor's precision.
    pub fn assign(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                expected: self.shape.clone(),
                got: vec![data.len()],
            });
        }
        let p = self.precision;
        for (dst, &src) in self.data.iter_mut().zip(data) {
            *dst = p.round(src);
        }
        Ok(())
    }

    fn round_all(&mut self) {
        if self.precision == Precision::HalfEmulated {
            for x in &mut self.data {
                *x = round_to_half(*x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nbytes_follows_precision() {
        let t = Tensor::zeros(vec![3, 4], Precision::Full);
        assert_eq!(t.nbytes(), 48);
        assert_eq!(t.cast(Precision::HalfEmulated).nbytes(), 24);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![], Precision::Full).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3], Precision::Full).is_err());
    }

    #[test]
    fn cast_examples() {
        let one = Tensor::scalar(1.0).cast(Precision::HalfEmulated);
        assert_eq!(one.item(), 1.0);
        let big = Tensor::scalar(65520.0).cast(Precision::HalfEmulated);
        assert_eq!(big.item(), f64::INFINITY);
        let tenth = Tensor::scalar(0.1).cast(Precision::HalfEmulated);
        assert!((tenth.item() - 0.1).abs() < 1e-4);
        assert_ne!(tenth.item(), 0.1);
        // half -> full is lossless
        assert_eq!(tenth.cast(Precision::Full).item(), tenth.item());
    }

    #[test]
    fn half_writes_are_rounded() {
        let mut t = Tensor::zeros(vec![2], Precision::HalfEmulated);
        t.assign(&[0.1, 1e6]).unwrap();
        assert!(crate::half::is_half_exact(t.data()[0]));
        assert_eq!(t.data()[1], f64::INFINITY);
    }
}
