//! Shared fixtures and straight-line reference implementations.
#![allow(dead_code)]

pub mod fd;

use blockshare::model::{Role, SharedBlock};
use blockshare::{BlockKind, LoraAdapter, Matrix, Model, ModelConfig, OutputNorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 7,
        max_seq_len: 16,
        norm_eps: 1e-5,
    }
}

/// Random model with every matrix entry and gain drawn at a scale where
/// the nonlinearities are exercised.
pub fn busy_model(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init_random(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (info, data) in m.tensors_mut() {
        let gain = info.name.ends_with("gain");
        for v in data.iter_mut() {
            *v = if gain { r.random_range(0.5..1.5) } else { r.random_range(-0.6..0.6) };
        }
    }
    m
}

/// A shared block on `base` with random non-zero adapters and gammas.
pub fn random_shared(config: &ModelConfig, base: usize, rank: usize, gamma: f64, seed: u64) -> SharedBlock {
    let mut r = rng(seed);
    let adapters: Vec<LoraAdapter> = Role::ALL
        .iter()
        .map(|role| {
            let (m, n) = role.shape(config);
            LoraAdapter {
                a: uniform(m, rank, -0.4, 0.4, &mut r),
                b: uniform(rank, n, -0.4, 0.4, &mut r),
            }
        })
        .collect();
    let d = config.d_model;
    let mut attn_norm = OutputNorm::new(d, gamma, config.norm_eps);
    let mut mlp_norm = OutputNorm::new(d, gamma, config.norm_eps);
    for g in attn_norm.gamma.iter_mut().chain(mlp_norm.gamma.iter_mut()) {
        *g *= r.random_range(0.5..1.5);
    }
    SharedBlock {
        base_index: base,
        adapters: adapters.try_into().unwrap(),
        attn_norm,
        mlp_norm,
    }
}

/// Two native blocks followed by a shared block on block 0.
pub fn model_with_shared(seed: u64) -> Model {
    let cfg = tiny_config(3);
    let mut m = busy_model(cfg, seed);
    m.blocks[2] = BlockKind::Shared(random_shared(&cfg, 0, 2, 0.7, seed + 1));
    m.validate().unwrap();
    m
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn mat_vec(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
        .collect()
}

fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(g).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
}

fn layer_norm_gain(h: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let n = h.len() as f64;
    let mu = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    h.iter().zip(gamma).map(|(v, g)| (v - mu) / (var + eps).sqrt() * g).collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Position-by-position forward pass written without any of the crate's
/// kernels. Returns `T × vocab` logits.
pub fn reference_forward(m: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let hd = d / h;
    let t_len = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|k| m.tok_emb.get(tok as usize, k) + m.pos_emb.get(t, k)).collect())
        .collect();
    for block in &m.blocks {
        let (base, shared) = match block {
            BlockKind::Native(w) => (w, None),
            BlockKind::Shared(s) | BlockKind::Repeated(s) => (m.blocks[s.base_index].native().unwrap(), Some(s)),
        };
        let w = |role: Role| -> Matrix {
            let mut w = base.role(role).clone();
            if let Some(s) = shared {
                w = w.add(&s.adapter(role).delta()).unwrap();
            }
            w
        };
        let (wq, wk, wv, wo, wu, wd) = (w(Role::Q), w(Role::K), w(Role::V), w(Role::O), w(Role::Up), w(Role::Down));
        let n1: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &base.attn_gain, cfg.norm_eps)).collect();
        let q: Vec<Vec<f64>> = n1.iter().map(|r| mat_vec(r, &wq)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|r| mat_vec(r, &wk)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|r| mat_vec(r, &wv)).collect();
        let mut attn = vec![vec![0.0; d]; t_len];
        for head in 0..h {
            let cols = head * hd..(head + 1) * hd;
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| cols.clone().map(|c| q[t][c] * k[s][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - mx).exp() / z;
                    for c in cols.clone() {
                        attn[t][c] += p * v[s][c];
                    }
                }
            }
        }
        for t in 0..t_len {
            let mut a = mat_vec(&attn[t], &wo);
            if let Some(s) = shared {
                a = layer_norm_gain(&a, &s.attn_norm.gamma, s.attn_norm.eps);
            }
            for c in 0..d {
                x[t][c] += a[c];
            }
            let n2 = rms(&x[t], &base.mlp_gain, cfg.norm_eps);
            let u: Vec<f64> = mat_vec(&n2, &wu).into_iter().map(gelu_tanh).collect();
            let mut o = mat_vec(&u, &wd);
            if let Some(s) = shared {
                o = layer_norm_gain(&o, &s.mlp_norm.gamma, s.mlp_norm.eps);
            }
            for c in 0..d {
                x[t][c] += o[c];
            }
        }
    }
    x.iter()
        .map(|r| mat_vec(&rms(r, &m.final_gain, cfg.norm_eps), &m.unembed))
        .collect()
}

/// Mean next-token cross-entropy computed from [`reference_forward`].
pub fn reference_loss(m: &Model, batch: &[&[u32]]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for seq in batch {
        let logits = reference_forward(m, seq);
        for t in 0..seq.len() - 1 {
            let row = &logits[t];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            sum += z.ln() + mx - row[seq[t + 1] as usize];
            n += 1;
        }
    }
    sum / n as f64
}

/// One native block followed by a shared block on it.
pub fn two_layer_shared(seed: u64) -> Model {
    let cfg = tiny_config(2);
    let mut m = busy_model(cfg, seed);
    m.blocks[1] = BlockKind::Shared(random_shared(&cfg, 0, 2, 0.7, seed + 1));
    m.validate().unwrap();
    m
}

pub fn batch_tokens(seed: u64) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..3).map(|_| random_tokens(6, 7, &mut r)).collect()
}
