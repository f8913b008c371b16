//! Dense real matrices, one-sided Jacobi SVD and rank-r truncation.
//!
//! Everything here is 64-bit and row-major. Products go through
//! `matrixmultiply::dgemm`, which accepts arbitrary strides, so transposed
//! operands never need to be materialised.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 30;
/// A column pair is considered orthogonal once `|a_p·a_q| <= tol·|a_p||a_q|`.
pub const SVD_ORTHO_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("empty matrix ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error(
        "jacobi svd of a {rows}x{cols} matrix did not converge after {sweeps} sweeps \
         (largest off-diagonal ratio {residual:e})"
    )]
    NoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
        residual: f64,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            writeln!(f, "  {}{}", shown.join(", "), if self.cols > 8 { ", ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::BadLength {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(LinalgError::NonFinite {
                row: idx / self.cols.max(1),
                col: idx % self.cols.max(1),
            }),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            MatRef::new(self),
            MatRef::new(other),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(w: &Matrix) -> f64 {
    w.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A strided read-only view, used to feed transposed operands to dgemm.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(m: &'a Matrix) -> Self {
        MatRef {
            data: &m.data,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    /// Row-major slice with `cols` columns and row stride `ld`.
    pub fn strided(data: &'a [f64], ld: usize) -> Self {
        MatRef {
            data,
            rs: ld as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c`, with `c` a dense row-major matrix.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut Matrix,
) {
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    gemm_slice(m, k, n, alpha, a, b, beta, &mut c.data, n);
}

/// Same as [`gemm`] but writes into a strided row-major slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slice(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.data.len() as isize >= span(m, k, a.rs, a.cs), "gemm lhs too short");
    assert!(b.data.len() as isize >= span(k, n, b.rs, b.cs), "gemm rhs too short");
    assert!(c.len() as isize >= span(m, n, ldc as isize, 1), "gemm out too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Thin SVD `w = u · diag(sigma) · vᵀ` with `k = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        truncate(self, k)
            .expect("full rank is always in range")
            .product()
    }
}

/// `left · right`, a rank ≤ r factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankApprox {
    pub left: Matrix,
    pub right: Matrix,
    pub rank: usize,
}

impl LowRankApprox {
    pub fn product(&self) -> Matrix {
        self.left
            .matmul(&self.right)
            .expect("low-rank factors conform by construction")
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Output is deterministic: singular values sorted descending, and each
/// column of `u` has its largest-magnitude entry non-negative.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if w.rows == 0 || w.cols == 0 {
        return Err(LinalgError::Empty {
            rows: w.rows,
            cols: w.cols,
        });
    }
    w.check_finite()?;
    if w.rows >= w.cols {
        let (u, sigma, v) = jacobi_tall(w)?;
        Ok(finish(u, sigma, v))
    } else {
        let (u, sigma, v) = jacobi_tall(&w.transpose())?;
        Ok(finish(v, sigma, u))
    }
}

/// One-sided Jacobi for `m >= n`. Returns (u, sigma, v) unsorted.
fn jacobi_tall(w: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = w.shape();
    // Column-major working copies: cols[j] is column j of the evolving A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let floor = f64::EPSILON * frobenius_norm(w);
    let floor_sq = floor * floor;
    let mut converged = n < 2;
    let mut last_residual = 0.0;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        let mut worst: f64 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..m {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if alpha <= floor_sq || beta <= floor_sq || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= SVD_ORTHO_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        last_residual = worst;
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            rows: m,
            cols: n,
            sweeps: SVD_MAX_SWEEPS,
            residual: last_residual,
        });
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    // Normalise non-negligible columns; complete the rest to an orthonormal set.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut ucols: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &j in &order {
        if sigma[j] > floor && sigma[j] > 0.0 {
            let u: Vec<f64> = cols[j].iter().map(|v| v / sigma[j]).collect();
            basis.push(u.clone());
            ucols[j] = Some(u);
        } else {
            pending.push(j);
        }
    }
    let mut next_e = 0;
    for j in pending {
        let u = loop {
            assert!(next_e < m, "orthonormal completion ran out of basis vectors");
            let mut cand = vec![0.0; m];
            cand[next_e] = 1.0;
            next_e += 1;
            // Two passes of Gram-Schmidt for stability.
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in cand.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let nrm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                break cand.into_iter().map(|v| v / nrm).collect::<Vec<_>>();
            }
        };
        basis.push(u.clone());
        ucols[j] = Some(u);
    }

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    for j in 0..n {
        let uc = ucols[j].as_ref().expect("every column assigned");
        for i in 0..m {
            u.set(i, j, uc[i]);
        }
        for i in 0..n {
            v.set(i, j, vcols[j][i]);
        }
    }
    let sigma = sigma
        .into_iter()
        .map(|s| if s > floor { s } else { 0.0 })
        .collect();
    Ok((u, sigma, v))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Sorts by descending sigma and applies the sign convention.
fn finish(u: Matrix, sigma: Vec<f64>, v: Matrix) -> SvdFactors {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut su = Matrix::zeros(u.rows, k);
    let mut sv = Matrix::zeros(v.rows, k);
    let mut ss = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        ss.push(sigma[src]);
        let ucol = u.column(src);
        let mut best = 0;
        for (i, val) in ucol.iter().enumerate() {
            if val.abs() > ucol[best].abs() {
                best = i;
            }
        }
        let sign = if ucol[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..u.rows {
            su.set(i, dst, sign * ucol[i]);
        }
        for i in 0..v.rows {
            sv.set(i, dst, sign * v.get(i, src));
        }
    }
    SvdFactors {
        u: su,
        sigma: ss,
        v: sv,
    }
}

/// Keeps the leading `r` singular triplets: `left = (UΣ)[:, :r]`,
/// `right = (V[:, :r])ᵀ`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<LowRankApprox> {
    let k = f.sigma.len();
    if r == 0 || r > k {
        return Err(LinalgError::RankOutOfRange { rank: r, max: k });
    }
    let m = f.u.rows();
    let n = f.v.rows();
    let left = Matrix::from_fn(m, r, |i, j| f.u.get(i, j) * f.sigma[j]);
    let right = Matrix::from_fn(r, n, |i, j| f.v.get(j, i));
    Ok(LowRankApprox {
        left,
        right,
        rank: r,
    })
}

/// Best rank-`r` approximation of `w` (Frobenius sense).
pub fn low_rank(w: &Matrix, r: usize) -> Result<LowRankApprox> {
    let f = svd(w)?;
    truncate(&f, r)
}
