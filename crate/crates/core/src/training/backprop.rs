//! Reverse-mode gradients of the mean next-token cross-entropy.
//!
//! Gradients are returned as a [`Model`] with the same block structure as
//! the input. A shared block's effective weight is `W_base + a·b`; its
//! gradient is added to the base block's projection (alongside the base's
//! own use) and projected onto the adapter factors.

use crate::linalg::{gemm, MatRef, Matrix};
use crate::model::{
    gelu_grad, output_norm_backward, rms_backward, BlockCache, BlockKind, BlockView, Model, ModelError, Role,
};
use crate::par::*;

use super::{Result, TrainError};

pub type Grads = Model;

/// `dst += aᵀ · b`
fn add_at_b(dst: &mut Matrix, a: &Matrix, b: &Matrix) {
    gemm(a.cols(), a.rows(), b.cols(), 1.0, MatRef::new(a).t(), MatRef::new(b), 1.0, dst);
}

/// `a · wᵀ`, optionally accumulated into `acc`.
fn mul_bt(a: &Matrix, w: &Matrix, acc: Option<Matrix>) -> Matrix {
    let (beta, mut out) = match acc {
        Some(m) => (1.0, m),
        None => (0.0, Matrix::zeros(a.rows(), w.rows())),
    };
    gemm(a.rows(), a.cols(), w.rows(), 1.0, MatRef::new(a), MatRef::new(w).t(), beta, &mut out);
    out
}

fn add_in_place(dst: &mut Matrix, src: &Matrix) {
    for (a, b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *a += b;
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Cross-entropy over positions `0..T-1` of every sequence. Returns the summed
/// loss, the number of predictions and `scale · d(sum)/d logits`.
fn cross_entropy(logits: &Matrix, seqs: &[&[u32]], seq_len: usize, scale: f64) -> (f64, usize, Matrix) {
    let vocab = logits.cols();
    let per_seq: Vec<(f64, Vec<f64>)> = seqs
        .par_iter()
        .enumerate()
        .map(|(b, toks)| {
            let mut loss = 0.0;
            let mut d = vec![0.0; seq_len * vocab];
            for t in 0..seq_len.saturating_sub(1) {
                let row = logits.row(b * seq_len + t);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let drow = &mut d[t * vocab..(t + 1) * vocab];
                for (o, x) in drow.iter_mut().zip(row) {
                    *o = (x - max).exp();
                    z += *o;
                }
                let target = toks[t + 1] as usize;
                loss += z.ln() + max - row[target];
                for o in drow.iter_mut() {
                    *o /= z;
                }
                drow[target] -= 1.0;
            }
            (loss, d)
        })
        .collect();
    let count = seqs.len() * seq_len.saturating_sub(1);
    let mut total = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), vocab);
    for (b, (loss, d)) in per_seq.into_iter().enumerate() {
        total += loss;
        let dst = &mut dlogits.as_mut_slice()[b * seq_len * vocab..(b + 1) * seq_len * vocab];
        for (o, x) in dst.iter_mut().zip(d) {
            *o = x * scale;
        }
    }
    (total, count, dlogits)
}

/// Gradients flowing out of one block.
struct BlockGrads {
    dx: Matrix,
    dw: [Matrix; 6],
    d_attn_gain: Vec<f64>,
    d_mlp_gain: Vec<f64>,
    d_attn_gamma: Vec<f64>,
    d_mlp_gamma: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_head_backward(
    c: &BlockCache,
    dattn: &Matrix,
    seq: usize,
    head: usize,
    seq_len: usize,
    head_dim: usize,
    n_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let d = dattn.cols();
    let off = seq * seq_len * d + head * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let p = &c.probs[seq * n_heads + head];
    let d_o = MatRef::strided(&dattn.as_slice()[off..], d);
    let qh = MatRef::strided(&c.q.as_slice()[off..], d);
    let kh = MatRef::strided(&c.k.as_slice()[off..], d);
    let vh = MatRef::strided(&c.v.as_slice()[off..], d);

    let mut dv = Matrix::zeros(seq_len, head_dim);
    gemm(seq_len, seq_len, head_dim, 1.0, MatRef::new(p).t(), d_o, 0.0, &mut dv);
    let mut dp = Matrix::zeros(seq_len, seq_len);
    gemm(seq_len, head_dim, seq_len, 1.0, d_o, vh.t(), 0.0, &mut dp);
    // softmax backward, in place: dS = P ⊙ (dP - rowsum(P ⊙ dP))
    for t in 0..seq_len {
        let prow = p.row(t);
        let drow = dp.row_mut(t);
        let dot: f64 = prow[..=t].iter().zip(&drow[..=t]).map(|(a, b)| a * b).sum();
        for j in 0..seq_len {
            drow[j] = if j <= t { prow[j] * (drow[j] - dot) } else { 0.0 };
        }
    }
    let mut dq = Matrix::zeros(seq_len, head_dim);
    gemm(seq_len, seq_len, head_dim, scale, MatRef::new(&dp), kh, 0.0, &mut dq);
    let mut dk = Matrix::zeros(seq_len, head_dim);
    gemm(seq_len, seq_len, head_dim, scale, MatRef::new(&dp).t(), qh, 0.0, &mut dk);
    (dq, dk, dv)
}

fn block_backward(
    view: &BlockView<'_>,
    c: &BlockCache,
    dx_out: Matrix,
    n_seqs: usize,
    seq_len: usize,
    n_heads: usize,
) -> BlockGrads {
    let d = dx_out.cols();
    let head_dim = d / n_heads;
    let zeros = || vec![0.0; d];
    let mut d_attn_gain = zeros();
    let mut d_mlp_gain = zeros();
    let mut d_attn_gamma = zeros();
    let mut d_mlp_gamma = zeros();
    let mut dw: [Matrix; 6] = Role::ALL.map(|r| {
        let w = view.w(r);
        Matrix::zeros(w.rows(), w.cols())
    });

    // MLP sublayer
    let d_mlp_out = match (&c.on2, view.out_norms) {
        (Some((xhat, inv)), Some((_, norm))) => output_norm_backward(xhat, inv, &norm.gamma, &dx_out, &mut d_mlp_gamma),
        _ => dx_out.clone(),
    };
    add_at_b(&mut dw[Role::Down.index()], &c.g, &d_mlp_out);
    let mut du = mul_bt(&d_mlp_out, view.w(Role::Down), None);
    for (g, u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
        *g *= gelu_grad(*u);
    }
    add_at_b(&mut dw[Role::Up.index()], &c.n2, &du);
    let dn2 = mul_bt(&du, view.w(Role::Up), None);
    let mut dx_mid = rms_backward(&c.x_mid, &c.inv2, view.mlp_gain, &dn2, &mut d_mlp_gain);
    add_in_place(&mut dx_mid, &dx_out);
    drop(dx_out);

    // attention sublayer
    let d_attn_out = match (&c.on1, view.out_norms) {
        (Some((xhat, inv)), Some((norm, _))) => output_norm_backward(xhat, inv, &norm.gamma, &dx_mid, &mut d_attn_gamma),
        _ => dx_mid.clone(),
    };
    add_at_b(&mut dw[Role::O.index()], &c.attn, &d_attn_out);
    let dattn = mul_bt(&d_attn_out, view.w(Role::O), None);

    let heads: Vec<(Matrix, Matrix, Matrix)> = (0..n_seqs * n_heads)
        .into_par_iter()
        .map(|job| attention_head_backward(c, &dattn, job / n_heads, job % n_heads, seq_len, head_dim, n_heads))
        .collect();
    let rows = n_seqs * seq_len;
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    for (job, (hq, hk, hv)) in heads.iter().enumerate() {
        let (b, h) = (job / n_heads, job % n_heads);
        let cols = h * head_dim..(h + 1) * head_dim;
        for t in 0..seq_len {
            let r = b * seq_len + t;
            dq.row_mut(r)[cols.clone()].copy_from_slice(hq.row(t));
            dk.row_mut(r)[cols.clone()].copy_from_slice(hk.row(t));
            dv.row_mut(r)[cols.clone()].copy_from_slice(hv.row(t));
        }
    }
    add_at_b(&mut dw[Role::Q.index()], &c.n1, &dq);
    add_at_b(&mut dw[Role::K.index()], &c.n1, &dk);
    add_at_b(&mut dw[Role::V.index()], &c.n1, &dv);
    let dn1 = mul_bt(&dq, view.w(Role::Q), None);
    let dn1 = mul_bt(&dk, view.w(Role::K), Some(dn1));
    let dn1 = mul_bt(&dv, view.w(Role::V), Some(dn1));
    let mut dx = rms_backward(&c.x_in, &c.inv1, view.attn_gain, &dn1, &mut d_attn_gain);
    add_in_place(&mut dx, &dx_mid);

    BlockGrads {
        dx,
        dw,
        d_attn_gain,
        d_mlp_gain,
        d_attn_gamma,
        d_mlp_gamma,
    }
}

/// Sequences per forward/backward pass. Larger batches are split so the
/// activations of one pass stay cache-resident; the pieces run in parallel
/// and their gradients are summed in a fixed order.
pub const MICRO_BATCH: usize = 8;

/// Mean next-token cross-entropy (nats) over a batch of equal-length
/// sequences, and its gradient with respect to every stored tensor.
pub fn loss_and_grads(model: &Model, batch: &[&[u32]]) -> Result<(f64, Grads)> {
    let seq_len = batch.first().map_or(0, |s| s.len());
    if let Some(s) = batch.iter().find(|s| s.len() != seq_len) {
        return Err(ModelError::RaggedBatch(seq_len, s.len()).into());
    }
    let count = batch.len() * seq_len.saturating_sub(1);
    if count == 0 {
        return Err(TrainError::NoTargets);
    }
    let scale = 1.0 / count as f64;
    let parts: Vec<Result<(f64, Grads)>> = batch
        .chunks(MICRO_BATCH)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|chunk| scaled_grads(model, chunk, scale))
        .collect();
    let mut sum = 0.0;
    let mut grads: Option<Grads> = None;
    for part in parts {
        let (s, g) = part?;
        sum += s;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for ((_, dst), (_, src)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                    add_slice(dst, src);
                }
            }
        }
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: None, loss });
    }
    Ok((loss, grads.expect("batch is nonempty")))
}

/// Summed loss of `batch` and `scale` times its gradient.
fn scaled_grads(model: &Model, batch: &[&[u32]], scale: f64) -> Result<(f64, Grads)> {
    let cfg = &model.config;
    let cache = model.forward_cached(batch)?;
    let (n_seqs, seq_len) = (cache.n_seqs, cache.seq_len);
    let (sum, _, dlogits) = cross_entropy(&cache.logits, batch, seq_len, scale);

    let mut grads = model.zeros_like();
    add_at_b(&mut grads.unembed, &cache.nf, &dlogits);
    let dnf = mul_bt(&dlogits, &model.unembed, None);
    let mut dx = rms_backward(&cache.x_final, &cache.inv_f, &model.final_gain, &dnf, &mut grads.final_gain);

    for (p, block_cache) in cache.blocks.iter().enumerate().rev() {
        let Some(bc) = block_cache else { continue };
        let view = model.block_view(p)?;
        let bg = block_backward(&view, bc, dx, n_seqs, seq_len, cfg.n_heads);
        dx = bg.dx;
        let base = match &model.blocks[p] {
            BlockKind::Native(_) => p,
            BlockKind::Shared(s) | BlockKind::Repeated(s) => s.base_index,
        };
        let BlockKind::Native(gw) = &mut grads.blocks[base] else {
            unreachable!("base resolved by block_view is native")
        };
        for role in Role::ALL {
            add_in_place(gw.role_mut(role), &bg.dw[role.index()]);
        }
        add_slice(&mut gw.attn_gain, &bg.d_attn_gain);
        add_slice(&mut gw.mlp_gain, &bg.d_mlp_gain);

        if let (Some(s), Some(gs)) = (model.blocks[p].shared(), grads.blocks[p].shared_mut()) {
            for role in Role::ALL {
                let ad = &s.adapters[role.index()];
                let g = &mut gs.adapters[role.index()];
                let dwr = &bg.dw[role.index()];
                // dA = dW · Bᵀ, dB = Aᵀ · dW
                g.a = mul_bt(dwr, &ad.b, None);
                add_at_b(&mut g.b, &ad.a, dwr);
            }
            add_slice(&mut gs.attn_norm.gamma, &bg.d_attn_gamma);
            add_slice(&mut gs.mlp_norm.gamma, &bg.d_mlp_gamma);
        }
    }

    for (b, toks) in batch.iter().enumerate() {
        for (t, &tok) in toks.iter().enumerate() {
            let src = dx.row(b * seq_len + t);
            add_slice(grads.tok_emb.row_mut(tok as usize), src);
            add_slice(grads.pos_emb.row_mut(t), src);
        }
    }
    Ok((sum, grads))
}

/// Loss only, via the plain forward pass.
pub fn batch_loss(model: &Model, batch: &[&[u32]]) -> Result<f64> {
    let logits = model.forward_batch(batch, Default::default())?;
    let seq_len = batch[0].len();
    let (sum, count, _) = cross_entropy(&logits, batch, seq_len, 0.0);
    if count == 0 {
        return Err(TrainError::NoTargets);
    }
    Ok(sum / count as f64)
}
