//! Dense row-major f64 tensor.
//!
//! All model computation in this crate runs on 64-bit floats; the buffer is
//! a plain `Vec<f64>` indexed row-major so every op can be written as an
//! explicit loop and checked against finite differences.

use crate::error::{Error, Result};

/// An n-dimensional tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorND {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorND {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorND {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        TensorND {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Wrap an existing buffer. The buffer length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorND {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Scalar (rank-0 is represented as shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        TensorND {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &TensorND) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &TensorND, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorND {
        TensorND {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(TensorND::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(TensorND::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn add_scaled_accumulates() {
        let mut a = TensorND::zeros(&[3]);
        let b = TensorND::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        a.add_scaled(&b, 0.5);
        assert_eq!(a.data(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn finiteness_check() {
        let mut a = TensorND::zeros(&[2]);
        assert!(a.all_finite());
        a.data_mut()[1] = f64::NAN;
        assert!(!a.all_finite());
    }
}
