//! Perplexity, greedy decoding and self-speculative decoding.
//!
//! The speculative drafter is the model itself with every `Shared` block
//! skipped. Both drafter and verifier decode greedily, so accepting the
//! longest agreeing prefix reproduces plain greedy output token for token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::{ForwardOptions, Model, ModelError};
use crate::par::*;

/// Windows scored per forward call when computing perplexity.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("context overflow: prompt {prompt} + {new} new tokens exceeds max_seq_len {max}")]
    ContextOverflow { prompt: usize, new: usize, max: usize },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Summed next-token negative log-likelihood of rows `0..len-1` of `logits`
/// against `tokens[1..]`.
fn window_nll(logits: &Matrix, row_off: usize, tokens: &[u32]) -> f64 {
    let mut nll = 0.0;
    for t in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(row_off + t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        nll += z.ln() + max - row[tokens[t + 1] as usize];
    }
    nll
}

/// `exp(mean next-token cross-entropy)` over non-overlapping windows of
/// `seq_len` tokens; each window contributes `len - 1` predictions.
pub fn perplexity(model: &Model, tokens: &[u32], seq_len: usize) -> Result<f64> {
    let (nll, count) = total_nll(model, tokens, seq_len)?;
    Ok((nll / count as f64).exp())
}

/// Summed negative log-likelihood and number of predictions.
pub fn total_nll(model: &Model, tokens: &[u32], seq_len: usize) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(InferenceError::EmptyCorpus);
    }
    if seq_len < 2 || seq_len > model.config.max_seq_len {
        return Err(InferenceError::InvalidConfig(format!(
            "eval window {seq_len} must be in 2..={}",
            model.config.max_seq_len
        )));
    }
    let windows: Vec<&[u32]> = tokens.chunks(seq_len).filter(|w| w.len() >= 2).collect();
    let (full, tail): (Vec<&[u32]>, Vec<&[u32]>) = windows.iter().partition(|w| w.len() == seq_len);
    let mut groups: Vec<Vec<&[u32]>> = full.chunks(EVAL_CHUNK).map(|c| c.to_vec()).collect();
    groups.extend(tail.into_iter().map(|w| vec![w]));
    let sums: Vec<Result<Vec<f64>>> = groups
        .par_iter()
        .map(|group| {
            let logits = model.forward_batch(group, ForwardOptions::default())?;
            let len = group[0].len();
            Ok(group
                .iter()
                .enumerate()
                .map(|(b, w)| window_nll(&logits, b * len, w))
                .collect())
        })
        .collect();
    let mut nll = 0.0;
    for s in sums {
        for v in s? {
            nll += v;
        }
    }
    let count = windows.iter().map(|w| w.len() - 1).sum();
    Ok((nll, count))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn check_context(model: &Model, prompt: &[u32], n: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(InferenceError::EmptyPrompt);
    }
    if prompt.len() + n > model.config.max_seq_len {
        return Err(InferenceError::ContextOverflow {
            prompt: prompt.len(),
            new: n,
            max: model.config.max_seq_len,
        });
    }
    Ok(())
}

fn next_token(model: &Model, seq: &[u32], opts: ForwardOptions) -> Result<u32> {
    let logits = model.forward_with(seq, opts)?;
    Ok(argmax(logits.row(logits.rows() - 1)))
}

/// Prompt followed by `n` greedily chosen tokens.
pub fn greedy_decode(model: &Model, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    check_context(model, prompt, n)?;
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let t = next_token(model, &seq, ForwardOptions::default())?;
        seq.push(t);
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Speculative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub draft_k: usize,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_new_tokens: 64,
            draft_k: 4,
            mode: DecodeMode::Speculative,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDecodeStats {
    pub proposed: usize,
    pub accepted: usize,
    pub full_forward_calls: usize,
    pub draft_forward_calls: usize,
}

impl SpecDecodeStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &SpecDecodeStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.full_forward_calls += other.full_forward_calls;
        self.draft_forward_calls += other.draft_forward_calls;
    }
}

/// Draft with shared blocks skipped, verify with the full model.
pub fn speculative_decode(model: &Model, prompt: &[u32], cfg: &DecodeConfig) -> Result<(Vec<u32>, SpecDecodeStats)> {
    if cfg.draft_k == 0 {
        return Err(InferenceError::InvalidConfig("draft_k must be >= 1".into()));
    }
    let n = cfg.max_new_tokens;
    check_context(model, prompt, n)?;
    let draft_opts = ForwardOptions { skip_shared: true };
    let mut stats = SpecDecodeStats::default();
    let mut seq = prompt.to_vec();
    let target = prompt.len() + n;
    while seq.len() < target {
        let remaining = target - seq.len();
        if remaining == 1 {
            // a lone token gains nothing from drafting
            seq.push(next_token(model, &seq, ForwardOptions::default())?);
            stats.full_forward_calls += 1;
            break;
        }
        let k = cfg.draft_k.min(remaining);
        let base_len = seq.len();
        let mut drafted = seq.clone();
        for _ in 0..k {
            let t = next_token(model, &drafted, draft_opts)?;
            stats.draft_forward_calls += 1;
            drafted.push(t);
        }
        stats.proposed += k;

        let logits = model.forward(&drafted)?;
        stats.full_forward_calls += 1;
        let mut accepted = 0;
        for i in 0..k {
            let verified = argmax(logits.row(base_len - 1 + i));
            seq.push(verified);
            if verified != drafted[base_len + i] {
                break;
            }
            accepted += 1;
        }
        stats.accepted += accepted;
        if accepted == k && seq.len() < target {
            seq.push(argmax(logits.row(base_len - 1 + k)));
        }
    }
    Ok((seq, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub mode: DecodeMode,
    pub stats: Option<SpecDecodeStats>,
}

pub fn decode(model: &Model, prompt: &[u32], cfg: &DecodeConfig) -> Result<Transcript> {
    let (seq, stats) = match cfg.mode {
        DecodeMode::Greedy => (greedy_decode(model, prompt, cfg.max_new_tokens)?, None),
        DecodeMode::Speculative => {
            let (s, st) = speculative_decode(model, prompt, cfg)?;
            (s, Some(st))
        }
    };
    Ok(Transcript {
        prompt: prompt.to_vec(),
        generated: seq[prompt.len()..].to_vec(),
        mode: cfg.mode,
        stats,
    })
}
