use std::borrow::Cow;

use crate::linalg::{gemm, MatRef, Matrix};
use crate::par::*;
use crate::surgery::norm::output_norm_row;
use crate::surgery::OutputNorm;

use super::{BlockKind, Model, ModelError, Result, Role};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Treat every `Shared` block as the identity (the draft submodel used
    /// by self-speculative decoding).
    pub skip_shared: bool,
}

/// Residual stream at every block boundary: `states[i]` is the input to
/// block `i`, the last entry is the output of the final block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Matrix>,
}

impl HiddenTrace {
    pub fn n_blocks(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Weights a block position actually computes with.
pub(crate) struct BlockView<'a> {
    pub weights: [Cow<'a, Matrix>; 6],
    pub attn_gain: &'a [f64],
    pub mlp_gain: &'a [f64],
    pub out_norms: Option<(&'a OutputNorm, &'a OutputNorm)>,
}

impl BlockView<'_> {
    pub fn w(&self, role: Role) -> &Matrix {
        &self.weights[role.index()]
    }
}

/// Everything the backward pass needs from one block.
pub(crate) struct BlockCache {
    pub x_in: Matrix,
    pub n1: Matrix,
    pub inv1: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, indexed `seq * n_heads + head`.
    pub probs: Vec<Matrix>,
    pub attn: Matrix,
    pub on1: Option<(Matrix, Vec<f64>)>,
    pub x_mid: Matrix,
    pub n2: Matrix,
    pub inv2: Vec<f64>,
    pub u: Matrix,
    pub g: Matrix,
    pub on2: Option<(Matrix, Vec<f64>)>,
}

pub(crate) struct ActivationCache {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub blocks: Vec<Option<BlockCache>>,
    pub x_final: Matrix,
    pub nf: Matrix,
    pub inv_f: Vec<f64>,
    pub logits: Matrix,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    // 0.5·(1 + tanh z) is the logistic function at 2z
    x / (1.0 + (-2.0 * SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).exp())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-2.0 * SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).exp());
    s + 2.0 * x * s * (1.0 - s) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise RMS normalisation with gain. Returns the output and `1/rms` per row.
pub(crate) fn rms_forward(x: &Matrix, gain: &[f64], eps: f64) -> (Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv.push(s);
        for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * s * g;
        }
    }
    (out, inv)
}

/// Backward of [`rms_forward`]; adds into `dgain`, returns `dx`.
pub(crate) fn rms_backward(x: &Matrix, inv: &[f64], gain: &[f64], dn: &Matrix, dgain: &mut [f64]) -> Matrix {
    let (n, d) = x.shape();
    let mut dx = Matrix::zeros(n, d);
    for r in 0..n {
        let (xr, dr, s) = (x.row(r), dn.row(r), inv[r]);
        let mut dot = 0.0;
        for k in 0..d {
            dgain[k] += dr[k] * xr[k] * s;
            dot += dr[k] * gain[k] * xr[k];
        }
        let coef = dot * s * s * s / d as f64;
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = dr[k] * gain[k] * s - xr[k] * coef;
        }
    }
    dx
}

fn output_norm_forward(h: &Matrix, norm: &OutputNorm, keep: bool) -> (Matrix, Option<(Matrix, Vec<f64>)>) {
    let (n, d) = h.shape();
    let mut y = Matrix::zeros(n, d);
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        inv.push(output_norm_row(h.row(r), &norm.gamma, norm.eps, y.row_mut(r)));
    }
    let cache = keep.then(|| {
        let mut xhat = Matrix::zeros(n, d);
        for r in 0..n {
            let row = h.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv[r];
            }
        }
        (xhat, inv)
    });
    (y, cache)
}

/// Backward of the output normalisation; adds into `dgamma`, returns `dh`.
pub(crate) fn output_norm_backward(
    xhat: &Matrix,
    inv: &[f64],
    gamma: &[f64],
    dy: &Matrix,
    dgamma: &mut [f64],
) -> Matrix {
    let (n, d) = xhat.shape();
    let mut dh = Matrix::zeros(n, d);
    let mut dxh = vec![0.0; d];
    for r in 0..n {
        let (xr, dr) = (xhat.row(r), dy.row(r));
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for k in 0..d {
            dgamma[k] += dr[k] * xr[k];
            dxh[k] = dr[k] * gamma[k];
            mean_d += dxh[k];
            mean_dx += dxh[k] * xr[k];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        for (k, o) in dh.row_mut(r).iter_mut().enumerate() {
            *o = inv[r] * (dxh[k] - mean_d - xr[k] * mean_dx);
        }
    }
    dh
}

fn linear(x: &Matrix, w: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(x.rows(), w.cols());
    gemm(x.rows(), x.cols(), w.cols(), 1.0, MatRef::new(x), MatRef::new(w), 0.0, &mut y);
    y
}

/// One causal attention head of one sequence: returns (probs, head output).
pub(crate) fn attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    seq: usize,
    head: usize,
    seq_len: usize,
    head_dim: usize,
) -> (Matrix, Matrix) {
    let d = q.cols();
    let off = seq * seq_len * d + head * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut p = Matrix::zeros(seq_len, seq_len);
    gemm(
        seq_len,
        head_dim,
        seq_len,
        scale,
        MatRef::strided(&q.as_slice()[off..], d),
        MatRef::strided(&k.as_slice()[off..], d).t(),
        0.0,
        &mut p,
    );
    for t in 0..seq_len {
        let row = p.row_mut(t);
        let max = row[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row[..=t].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row[..=t].iter_mut() {
            *x /= sum;
        }
        for x in row[t + 1..].iter_mut() {
            *x = 0.0;
        }
    }
    let mut o = Matrix::zeros(seq_len, head_dim);
    gemm(
        seq_len,
        seq_len,
        head_dim,
        1.0,
        MatRef::new(&p),
        MatRef::strided(&v.as_slice()[off..], d),
        0.0,
        &mut o,
    );
    (p, o)
}

/// Applies one block to a stacked batch `x` of `n_seqs` sequences.
pub(crate) fn run_block(
    view: &BlockView<'_>,
    x: &Matrix,
    n_seqs: usize,
    seq_len: usize,
    n_heads: usize,
    eps: f64,
    keep: bool,
) -> (Matrix, Option<BlockCache>) {
    let d = x.cols();
    let head_dim = d / n_heads;

    let (n1, inv1) = rms_forward(x, view.attn_gain, eps);
    let q = linear(&n1, view.w(Role::Q));
    let k = linear(&n1, view.w(Role::K));
    let v = linear(&n1, view.w(Role::V));

    let heads: Vec<(Matrix, Matrix)> = (0..n_seqs * n_heads)
        .into_par_iter()
        .map(|job| attention_head(&q, &k, &v, job / n_heads, job % n_heads, seq_len, head_dim))
        .collect();
    let mut attn = Matrix::zeros(x.rows(), d);
    for (job, (_, o)) in heads.iter().enumerate() {
        let (b, h) = (job / n_heads, job % n_heads);
        for t in 0..seq_len {
            attn.row_mut(b * seq_len + t)[h * head_dim..(h + 1) * head_dim].copy_from_slice(o.row(t));
        }
    }
    let attn_out = linear(&attn, view.w(Role::O));
    let (attn_y, on1) = match view.out_norms {
        Some((norm, _)) => {
            let (y, c) = output_norm_forward(&attn_out, norm, keep);
            (Cow::Owned(y), c)
        }
        None => (Cow::Borrowed(&attn_out), None),
    };
    let mut x_mid = x.clone();
    for (a, b) in x_mid.as_mut_slice().iter_mut().zip(attn_y.as_slice()) {
        *a += b;
    }

    let (n2, inv2) = rms_forward(&x_mid, view.mlp_gain, eps);
    let u = linear(&n2, view.w(Role::Up));
    let mut g = u.clone();
    for val in g.as_mut_slice() {
        *val = gelu(*val);
    }
    let mlp_out = linear(&g, view.w(Role::Down));
    let (mlp_y, on2) = match view.out_norms {
        Some((_, norm)) => {
            let (y, c) = output_norm_forward(&mlp_out, norm, keep);
            (Cow::Owned(y), c)
        }
        None => (Cow::Borrowed(&mlp_out), None),
    };
    let mut x_out = x_mid.clone();
    for (a, b) in x_out.as_mut_slice().iter_mut().zip(mlp_y.as_slice()) {
        *a += b;
    }
    drop(attn_y);
    drop(mlp_y);

    let cache = keep.then(|| BlockCache {
        x_in: x.clone(),
        n1,
        inv1,
        q,
        k,
        v,
        probs: heads.into_iter().map(|(p, _)| p).collect(),
        attn,
        on1,
        x_mid,
        n2,
        inv2,
        u,
        g,
        on2,
    });
    (x_out, cache)
}

enum Capture {
    Nothing,
    Trace,
    Cache,
}

impl Model {
    pub(crate) fn block_view(&self, position: usize) -> Result<BlockView<'_>> {
        let base = self.base_weights(position)?;
        let shared = self.blocks[position].shared();
        let weights = Role::ALL.map(|role| match shared {
            None => Cow::Borrowed(base.role(role)),
            Some(s) => {
                let mut w = base.role(role).clone();
                let a = &s.adapters[role.index()];
                let (m, r, n) = (a.a.rows(), a.a.cols(), a.b.cols());
                gemm(m, r, n, 1.0, MatRef::new(&a.a), MatRef::new(&a.b), 1.0, &mut w);
                Cow::Owned(w)
            }
        });
        Ok(BlockView {
            weights,
            attn_gain: &base.attn_gain,
            mlp_gain: &base.mlp_gain,
            out_norms: shared.map(|s| (&s.attn_norm, &s.mlp_norm)),
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, seqs: &[&[u32]]) -> Result<(Matrix, usize)> {
        let seq_len = seqs.first().map_or(0, |s| s.len());
        for s in seqs {
            if s.len() != seq_len {
                return Err(ModelError::RaggedBatch(seq_len, s.len()));
            }
            self.check_tokens(s)?;
        }
        let d = self.config.d_model;
        let mut x = Matrix::zeros(seqs.len() * seq_len, d);
        for (b, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                let row = x.row_mut(b * seq_len + t);
                for ((o, e), p) in row.iter_mut().zip(self.tok_emb.row(tok as usize)).zip(self.pos_emb.row(t)) {
                    *o = e + p;
                }
            }
        }
        Ok((x, seq_len))
    }

    fn run(
        &self,
        seqs: &[&[u32]],
        opts: ForwardOptions,
        capture: Capture,
    ) -> Result<(Matrix, Option<HiddenTrace>, Option<ActivationCache>)> {
        if seqs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let cfg = &self.config;
        let (mut x, seq_len) = self.embed(seqs)?;
        let n_seqs = seqs.len();
        let keep = matches!(capture, Capture::Cache);
        let mut states = Vec::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (p, block) in self.blocks.iter().enumerate() {
            if matches!(capture, Capture::Trace) {
                states.push(x.clone());
            }
            if opts.skip_shared && matches!(block, BlockKind::Shared(_)) {
                caches.push(None);
                continue;
            }
            let view = self.block_view(p)?;
            let (next, cache) = run_block(&view, &x, n_seqs, seq_len, cfg.n_heads, cfg.norm_eps, keep);
            caches.push(cache);
            x = next;
        }
        if matches!(capture, Capture::Trace) {
            states.push(x.clone());
        }
        let (nf, inv_f) = rms_forward(&x, &self.final_gain, cfg.norm_eps);
        let logits = linear(&nf, &self.unembed);
        match capture {
            Capture::Nothing => Ok((logits, None, None)),
            Capture::Trace => Ok((logits, Some(HiddenTrace { states }), None)),
            Capture::Cache => {
                let cache = ActivationCache {
                    n_seqs,
                    seq_len,
                    blocks: caches,
                    x_final: x,
                    nf,
                    inv_f,
                    logits: logits.clone(),
                };
                Ok((logits, None, Some(cache)))
            }
        }
    }

    /// Logits (`T × vocab`) for one token sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_with(tokens, ForwardOptions::default())
    }

    pub fn forward_with(&self, tokens: &[u32], opts: ForwardOptions) -> Result<Matrix> {
        Ok(self.run(&[tokens], opts, Capture::Nothing)?.0)
    }

    /// Logits plus the residual stream at every block boundary.
    pub fn forward_traced(&self, tokens: &[u32]) -> Result<(Matrix, HiddenTrace)> {
        let (logits, trace, _) = self.run(&[tokens], ForwardOptions::default(), Capture::Trace)?;
        Ok((logits, trace.expect("trace captured")))
    }

    /// Logits for a batch of equal-length sequences, stacked row-wise.
    pub fn forward_batch(&self, seqs: &[&[u32]], opts: ForwardOptions) -> Result<Matrix> {
        Ok(self.run(seqs, opts, Capture::Nothing)?.0)
    }

    pub(crate) fn forward_cached(&self, seqs: &[&[u32]]) -> Result<ActivationCache> {
        Ok(self
            .run(seqs, ForwardOptions::default(), Capture::Cache)?
            .2
            .expect("cache captured"))
    }

    /// Applies only block `position` to a `T × d_model` residual stream.
    pub fn apply_block(&self, position: usize, x: &Matrix) -> Result<Matrix> {
        let view = self.block_view(position)?;
        let cfg = &self.config;
        Ok(run_block(&view, x, 1, x.rows(), cfg.n_heads, cfg.norm_eps, false).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(n_layers: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab,
            max_seq_len: 16,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn logits_shape_and_errors() {
        let m = Model::init_random(tiny(2, 11), 0).unwrap();
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), (3, 11));
        assert!(matches!(m.forward(&[11]), Err(ModelError::TokenOutOfRange { token: 11, vocab: 11 })));
        assert!(matches!(m.forward(&[0; 17]), Err(ModelError::SequenceTooLong { len: 17, max: 16 })));
        assert!(matches!(m.forward(&[]), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn single_token_vocab() {
        let m = Model::init_random(tiny(2, 1), 0).unwrap();
        assert_eq!(m.forward(&[0, 0, 0]).unwrap().shape(), (3, 1));
    }

    #[test]
    fn causal_prefix_logits_do_not_depend_on_future() {
        let m = Model::init_random(tiny(2, 11), 5).unwrap();
        let full = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let pre = m.forward(&[1, 2, 3]).unwrap();
        for t in 0..3 {
            for (a, b) in full.row(t).iter().zip(pre.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let m = Model::init_random(tiny(2, 11), 5).unwrap();
        let a: &[u32] = &[1, 2, 3, 4];
        let b: &[u32] = &[7, 7, 0, 10];
        let batch = m.forward_batch(&[a, b], ForwardOptions::default()).unwrap();
        let la = m.forward(a).unwrap();
        let lb = m.forward(b).unwrap();
        for t in 0..4 {
            assert_eq!(batch.row(t), la.row(t));
            assert_eq!(batch.row(4 + t), lb.row(t));
        }
    }

    #[test]
    fn trace_entries_chain_through_blocks() {
        let m = Model::init_random(tiny(3, 11), 2).unwrap();
        let (_, trace) = m.forward_traced(&[3, 1, 4, 1, 5, 9]).unwrap();
        assert_eq!(trace.states.len(), 4);
        for i in 0..3 {
            let next = m.apply_block(i, &trace.states[i]).unwrap();
            assert!(next.max_abs_diff(&trace.states[i + 1]).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for x in [-40.0, -3.0, -0.5, 0.0, 1e-9, 0.3, 2.0, 40.0] {
            let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
            let want = 0.5 * x * (1.0 + t);
            assert!((gelu(x) - want).abs() <= 1e-15 * (1.0 + x.abs()), "{x}");
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
