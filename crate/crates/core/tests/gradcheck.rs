//! Backprop against central finite differences, per parameter class.

mod common;

use blockshare::model::ParamClass;
use blockshare::training::loss_and_grads;
use blockshare::Model;
use common::fd::{classes, compare, rel_err, site_additivity};
use common::*;

const TOL: f64 = 1e-6;

fn check_all(m: &Model, shared_pos: usize) {
    let batch = batch_tokens(12);
    for (name, pick) in classes() {
        let (g, fd) = compare(m, &batch, pick, 5, 13);
        let e = rel_err(&g, &fd);
        assert!(e <= TOL, "{name}: relative error {e:e}\n  backprop {g:?}\n  numeric  {fd:?}");
    }
    let (back, summed, parts) = site_additivity(m, &batch, 0, shared_pos, 3, 23);
    let e = rel_err(&back, &summed);
    assert!(e <= TOL, "multi-site: relative error {e:e}");
    // both sites actually contribute
    assert!(parts.iter().all(|(a, b)| a.abs() > 0.0 && b.abs() > 0.0));
}

#[test]
fn two_layer_model() {
    check_all(&two_layer_shared(11), 1);
}

#[test]
fn three_layer_model() {
    check_all(&model_with_shared(11), 2);
}

#[test]
fn unshared_native_block() {
    let m = model_with_shared(17);
    let (g, fd) = compare(&m, &batch_tokens(18), |c, b| matches!(c, ParamClass::Projection(_)) && b == Some(1), 5, 19);
    assert!(rel_err(&g, &fd) <= TOL);
}

#[test]
fn loss_matches_reference_implementation() {
    let m = model_with_shared(31);
    let batch = batch_tokens(32);
    let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    let ours = loss_and_grads(&m, &refs).unwrap().0;
    let want = reference_loss(&m, &refs);
    assert!((ours - want).abs() <= 1e-12, "{ours} vs {want}");
}

#[test]
fn micro_batches_match_single_pass() {
    // 11 sequences span two micro-batches of unequal size
    let m = model_with_shared(41);
    let mut r = rng(42);
    let seqs: Vec<Vec<u32>> = (0..11).map(|_| random_tokens(5, 7, &mut r)).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (loss_all, g_all) = loss_and_grads(&m, &refs).unwrap();
    let want = reference_loss(&m, &refs);
    assert!((loss_all - want).abs() <= 1e-12);
    // gradient of the mean is the count-weighted mean of chunk gradients
    let (l1, g1) = loss_and_grads(&m, &refs[..8]).unwrap();
    let (l2, g2) = loss_and_grads(&m, &refs[8..]).unwrap();
    assert!((loss_all - (8.0 * l1 + 3.0 * l2) / 11.0).abs() <= 1e-12);
    for (((_, a), (_, b)), (_, c)) in g_all.tensors().iter().zip(g1.tensors()).zip(g2.tensors()) {
        for k in 0..a.len() {
            let w = (8.0 * b[k] + 3.0 * c[k]) / 11.0;
            assert!((a[k] - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }
}
