//! Dense row-major tensor over f64 plus the handful of kernels everything
//! else is built from (matmul, softmax, transpose).
//!
//! Design notes:
//! - storage is a flat `Vec<f64>`; shape is a list of extents, all >= 1;
//! - all arithmetic is 64-bit — small models, exact reproducibility;
//! - matmul fixes the summation order to ascending k, so results are
//!   bit-identical to the naive triple loop regardless of loop blocking.

use crate::error::{Error, Result};

/// Sentinel for masked-out logits: softmax maps these to exactly 0.
pub const MASKED: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e >= 1),
            "tensor extents must all be >= 1, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e >= 1),
            "tensor extents must all be >= 1, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Matrix product (2-D × 2-D). Summation runs over ascending k for every
    /// output element, so the result is bit-identical to the naive triple
    /// loop; the i-k-j loop order just makes the inner loop stride-1.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let dst = &mut out.data[i * n..(i + 1) * n];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                let src = &rhs.data[kk * n..(kk + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose() needs a 2-D tensor");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax over a slice. Entries equal to [`MASKED`]
/// contribute exactly 0 to the output; every other entry must be finite.
/// Fails with the invalid-gate error if all entries are masked.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v == MASKED {
            continue;
        }
        assert!(v.is_finite(), "softmax input must be finite or MASKED");
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        if v != MASKED {
            *o = (v - max).exp();
            sum += *o;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}
