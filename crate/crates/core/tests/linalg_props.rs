mod common;

use blockshare::linalg::{frobenius_norm, low_rank, svd, truncate};
use blockshare::Matrix;
use proptest::prelude::*;

fn matrix_strategy(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(m, n)| {
        prop::collection::vec(-10.0f64..10.0, m * n).prop_map(move |d| Matrix::from_vec(m, n, d).unwrap())
    })
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Orthogonal matrix from Gram-Schmidt on a seeded random square matrix.
fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let mut r = common::rng(seed);
    let g = common::uniform(n, n, -1.0, 1.0, &mut r);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v = g.column(j);
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

fn orthonormality_error(q: &Matrix) -> f64 {
    let g = naive_matmul(&q.transpose(), q);
    g.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reconstruction_is_tight(w in matrix_strategy(24)) {
        let f = svd(&w).unwrap();
        let err = w.sub(&f.reconstruct()).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * w.frobenius_norm().max(1.0), "err {err}");
        prop_assert!(orthonormality_error(&f.u) <= 1e-8 || f.sigma.contains(&0.0));
        prop_assert!(orthonormality_error(&f.v) <= 1e-8);
        prop_assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(f.sigma.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn eckart_young_residual(w in matrix_strategy(16), frac in 0.0f64..1.0) {
        let f = svd(&w).unwrap();
        let k = f.sigma.len();
        let r = 1 + ((k - 1) as f64 * frac) as usize;
        let approx = truncate(&f, r).unwrap();
        let resid = w.sub(&naive_matmul(&approx.left, &approx.right)).unwrap().frobenius_norm().powi(2);
        let tail: f64 = f.sigma[r..].iter().map(|s| s * s).sum();
        prop_assert!((resid - tail).abs() <= 1e-10, "{resid} vs {tail}");
    }

    #[test]
    fn frobenius_equals_singular_energy(w in matrix_strategy(20)) {
        let f = svd(&w).unwrap();
        let fro2 = frobenius_norm(&w).powi(2);
        let s2: f64 = f.sigma.iter().map(|s| s * s).sum();
        prop_assert!((fro2 - s2).abs() <= 1e-9 * fro2.max(1e-300));
    }

    #[test]
    fn singular_values_orthogonally_invariant(w in matrix_strategy(12), seed in any::<u64>()) {
        let left = random_orthogonal(w.rows(), seed);
        let right = random_orthogonal(w.cols(), seed.wrapping_add(1));
        let rotated = naive_matmul(&naive_matmul(&left, &w), &right);
        let a = svd(&w).unwrap().sigma;
        let b = svd(&rotated).unwrap().sigma;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_matches_naive(a in matrix_strategy(20), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let b = common::uniform(a.cols(), 1 + (seed % 17) as usize, -3.0, 3.0, &mut r);
        let fast = a.matmul(&b).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-11);
    }
}

#[test]
fn two_by_two_closed_form() {
    // singular values of [[a, b], [c, d]] from the eigenvalues of WᵀW
    let w = Matrix::from_rows(&[&[3.0, 1.0], &[-2.0, 4.0]]).unwrap();
    let (a, b, c, d) = (3.0f64, 1.0f64, -2.0f64, 4.0f64);
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s1 * s1 - 4.0 * det * det).sqrt();
    let want = [((s1 + disc) / 2.0).sqrt(), ((s1 - disc) / 2.0).sqrt()];
    let got = svd(&w).unwrap().sigma;
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn sign_convention_and_determinism() {
    let mut r = common::rng(3);
    let w = common::uniform(9, 5, -10.0, 10.0, &mut r);
    let f = svd(&w).unwrap();
    for j in 0..f.u.cols() {
        let col = f.u.column(j);
        let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big >= 0.0);
    }
    assert_eq!(f, svd(&w).unwrap());
}

#[test]
fn zero_and_rank_deficient_inputs() {
    let z = Matrix::zeros(4, 3);
    let f = svd(&z).unwrap();
    assert!(f.sigma.iter().all(|s| *s == 0.0));
    assert_eq!(f.reconstruct(), z);

    let u = Matrix::from_rows(&[&[1.0], &[2.0], &[-1.0]]).unwrap();
    let v = Matrix::from_rows(&[&[2.0, 0.5, 1.0, -3.0]]).unwrap();
    let outer = naive_matmul(&u, &v);
    let f = svd(&outer).unwrap();
    assert!(f.sigma[1..].iter().all(|s| *s <= 1e-12));
    let approx = low_rank(&outer, 1).unwrap().product();
    assert!(approx.max_abs_diff(&outer).unwrap() <= 1e-12);
}

#[test]
fn bad_ranks_rejected() {
    let w = Matrix::identity(3);
    let f = svd(&w).unwrap();
    assert!(truncate(&f, 0).is_err());
    assert!(truncate(&f, 4).is_err());
    assert!(svd(&Matrix::zeros(0, 3)).is_err());
    let mut nan = Matrix::identity(2);
    nan.set(0, 1, f64::NAN);
    assert!(svd(&nan).is_err());
}
