//! Central finite differences against backprop.

use blockshare::model::{ParamClass, Role};
use blockshare::training::{batch_loss, loss_and_grads};
use blockshare::{BlockKind, Matrix, Model};
use rand::Rng;

use super::rng;

pub const H: f64 = 1e-5;

pub fn loss(m: &Model, batch: &[Vec<u32>]) -> f64 {
    let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    batch_loss(m, &refs).unwrap()
}

fn perturbed(m: &Model, tensor: usize, idx: usize, delta: f64) -> Model {
    let mut p = m.clone();
    p.tensors_mut()[tensor].1[idx] += delta;
    p
}

/// `‖g − fd‖ / ‖fd‖`.
pub fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let num: f64 = g.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den
}

/// Backprop and finite-difference values at `per_tensor` sampled entries
/// of every tensor whose class satisfies `pick`.
pub fn compare(
    m: &Model,
    batch: &[Vec<u32>],
    pick: impl Fn(&ParamClass, Option<usize>) -> bool,
    per_tensor: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = loss_and_grads(m, &refs).unwrap();
    let gt = grads.tensors();
    let mut r = rng(seed);
    let (mut g, mut fd) = (Vec::new(), Vec::new());
    for (t, (info, data)) in m.tensors().iter().enumerate() {
        if !pick(&info.class, info.block) {
            continue;
        }
        for _ in 0..per_tensor {
            let idx = r.random_range(0..data.len());
            let lp = loss(&perturbed(m, t, idx, H), batch);
            let lm = loss(&perturbed(m, t, idx, -H), batch);
            fd.push((lp - lm) / (2.0 * H));
            g.push(gt[t].1[idx]);
        }
    }
    assert!(!g.is_empty(), "no tensor matched");
    (g, fd)
}

/// `m` with one extra adapter rank on every role of the shared block at
/// `pos`; the new rank adds `delta` at entry `(i, j)` of `role` only.
pub fn with_point_correction(m: &Model, pos: usize, role: Role, i: usize, j: usize, delta: f64) -> Model {
    let mut out = m.clone();
    let BlockKind::Shared(s) = &mut out.blocks[pos] else { panic!("not shared") };
    for r in Role::ALL {
        let ad = &mut s.adapters[r.index()];
        let (rows, rank, cols) = (ad.a.rows(), ad.a.cols(), ad.b.cols());
        let hit = r == role;
        let a = Matrix::from_fn(rows, rank + 1, |p, q| {
            if q < rank {
                ad.a.get(p, q)
            } else if hit && p == i {
                delta
            } else {
                0.0
            }
        });
        let b = Matrix::from_fn(rank + 1, cols, |p, q| {
            if p < rank {
                ad.b.get(p, q)
            } else if hit && q == j {
                1.0
            } else {
                0.0
            }
        });
        ad.a = a;
        ad.b = b;
    }
    out
}

/// For a base block used natively at position `base` and through the
/// shared block at `pos`: backprop gradients on sampled base entries next
/// to the sum of the two single-site finite differences, and the
/// single-site parts themselves.
pub fn site_additivity(m: &Model, batch: &[Vec<u32>], base: usize, pos: usize, per_role: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<(f64, f64)>) {
    let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = loss_and_grads(m, &refs).unwrap();
    let g0 = grads.blocks[base].native().unwrap().clone();
    let mut r = rng(seed);
    let (mut back, mut summed, mut parts) = (Vec::new(), Vec::new(), Vec::new());
    for role in Role::ALL {
        let (rows, cols) = role.shape(&m.config);
        for _ in 0..per_role {
            let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
            let bump_base = |d: f64| {
                let mut p = m.clone();
                let BlockKind::Native(w) = &mut p.blocks[base] else { panic!("base not native") };
                let v = w.role(role).get(i, j);
                w.role_mut(role).set(i, j, v + d);
                p
            };
            // native use only: move the base, cancel the move at the shared site
            let native_site = |d: f64| with_point_correction(&bump_base(d), pos, role, i, j, -d);
            let shared_site = |d: f64| with_point_correction(m, pos, role, i, j, d);
            let fd0 = (loss(&native_site(H), batch) - loss(&native_site(-H), batch)) / (2.0 * H);
            let fd1 = (loss(&shared_site(H), batch) - loss(&shared_site(-H), batch)) / (2.0 * H);
            back.push(g0.role(role).get(i, j));
            summed.push(fd0 + fd1);
            parts.push((fd0, fd1));
        }
    }
    (back, summed, parts)
}

/// Named parameter-class filters checked by the gradient tests.
pub fn classes() -> Vec<(&'static str, fn(&ParamClass, Option<usize>) -> bool)> {
    vec![
        ("adapter a", |c, _| matches!(c, ParamClass::AdapterA(_))),
        ("adapter b", |c, _| matches!(c, ParamClass::AdapterB(_))),
        ("gamma", |c, _| matches!(c, ParamClass::OutputGamma)),
        ("shared base weight", |c, b| matches!(c, ParamClass::Projection(_)) && b == Some(0)),
        ("embedding", |c, _| matches!(c, ParamClass::TokenEmbedding | ParamClass::PositionEmbedding)),
        ("norm gain", |c, _| matches!(c, ParamClass::NormGain | ParamClass::FinalGain)),
        ("unembedding", |c, _| matches!(c, ParamClass::Unembedding)),
    ]
}
