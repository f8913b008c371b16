use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, LinalgError, Matrix};

/// Low-rank correction `a · b` added to a shared projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// m × r
    pub a: Matrix,
    /// r × n
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn host_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn delta(&self) -> Matrix {
        self.a
            .matmul(&self.b)
            .expect("adapter factors conform by construction")
    }

    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }

    /// `a = 0`, `b` small random, so `a · b = 0` while both factors still
    /// receive gradient once training starts.
    pub fn zero_product<R: Rng>(rows: usize, cols: usize, rank: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        LoraAdapter {
            a: Matrix::zeros(rows, rank),
            b: Matrix::from_fn(rank, cols, |_, _| normal.sample(rng)),
        }
    }

    /// Best rank-`r` factorisation of `wi - wj`: `a = (UΣ)[:, :r]`,
    /// `b = V[:, :r]ᵀ`.
    pub fn from_difference(wi: &Matrix, wj: &Matrix, r: usize) -> Result<Self, LinalgError> {
        let diff = wi.sub(wj)?;
        let approx = linalg::low_rank(&diff, r)?;
        Ok(LoraAdapter {
            a: approx.left,
            b: approx.right,
        })
    }
}

/// Mean/variance normalisation of a sublayer output with a learnable gain
/// and no shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputNorm {
    pub gamma: Vec<f64>,
    pub eps: f64,
}

impl OutputNorm {
    pub fn new(d_model: usize, gamma_init: f64, eps: f64) -> Self {
        OutputNorm {
            gamma: vec![gamma_init; d_model],
            eps,
        }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        output_norm_apply(h, self)
    }
}

/// `(h - mean(h)) / sqrt(var(h) + eps) * gamma`, population variance over
/// the hidden dimension.
pub fn output_norm_apply(h: &[f64], norm: &OutputNorm) -> Vec<f64> {
    assert_eq!(h.len(), norm.gamma.len(), "output norm width");
    let mut out = vec![0.0; h.len()];
    output_norm_row(h, &norm.gamma, norm.eps, &mut out);
    out
}

/// Row kernel shared with the batched forward pass. Returns `1/sigma`.
#[inline]
pub(crate) fn output_norm_row(h: &[f64], gamma: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let d = h.len() as f64;
    let mean = h.iter().sum::<f64>() / d;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_sigma = 1.0 / (var + eps).sqrt();
    for ((o, x), g) in out.iter_mut().zip(h).zip(gamma) {
        *o = (x - mean) * inv_sigma * g;
    }
    inv_sigma
}
