//! Synthetic token streams from a seeded order-2 Markov source.
//!
//! The next token depends on the previous two: with probability `noise` it
//! is uniform, otherwise it is drawn from a sparse successor table keyed by
//! the previous token (weight `mix`) or by the token before that
//! (weight `1 - mix`). The induced `V² × V` transition table is fixed by
//! the seed, and the uniform floor makes the pair chain irreducible.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stage_seed;

pub const DEFAULT_BRANCHING: usize = 4;
pub const DEFAULT_MIX: f64 = 0.5;
pub const DEFAULT_NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "corpus/train",
            Split::Valid => "corpus/valid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub vocab_size: usize,
    /// Successors keyed by the previous token.
    pub near: Vec<Vec<(u32, f64)>>,
    /// Successors keyed by the token two back.
    pub far: Vec<Vec<(u32, f64)>>,
    pub mix: f64,
    pub noise: f64,
}

fn sparse_row(rng: &mut ChaCha8Rng, vocab: usize, k: usize) -> Vec<(u32, f64)> {
    let ids = sample(rng, vocab, k);
    // Dirichlet(1) weights via normalised exponentials.
    let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut row: Vec<(u32, f64)> = ids.iter().zip(w).map(|(i, x)| (i as u32, x / total)).collect();
    row.sort_by_key(|(i, _)| *i);
    row
}

impl MarkovSource {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        assert!(vocab_size >= 4, "markov source needs vocab >= 4");
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "corpus/table"));
        let k = DEFAULT_BRANCHING.min(vocab_size);
        let near = (0..vocab_size).map(|_| sparse_row(&mut rng, vocab_size, k)).collect();
        let far = (0..vocab_size).map(|_| sparse_row(&mut rng, vocab_size, k)).collect();
        MarkovSource {
            vocab_size,
            near,
            far,
            mix: DEFAULT_MIX,
            noise: DEFAULT_NOISE,
        }
    }

    /// Full conditional distribution `P(· | prev2, prev1)`.
    pub fn conditional(&self, prev2: u32, prev1: u32) -> Vec<f64> {
        let v = self.vocab_size;
        let mut p = vec![self.noise / v as f64; v];
        for &(c, w) in &self.near[prev1 as usize] {
            p[c as usize] += (1.0 - self.noise) * self.mix * w;
        }
        for &(c, w) in &self.far[prev2 as usize] {
            p[c as usize] += (1.0 - self.noise) * (1.0 - self.mix) * w;
        }
        p
    }

    fn draw_row(row: &[(u32, f64)], u: f64) -> u32 {
        let mut acc = 0.0;
        for &(c, w) in row {
            acc += w;
            if u < acc {
                return c;
            }
        }
        row.last().expect("non-empty row").0
    }

    pub fn sample(&self, n_tokens: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = self.vocab_size as u32;
        let mut out = Vec::with_capacity(n_tokens);
        let mut prev2 = rng.random_range(0..v);
        let mut prev1 = rng.random_range(0..v);
        for _ in 0..n_tokens {
            let pick: f64 = rng.random();
            let u: f64 = rng.random();
            let next = if pick < self.noise {
                rng.random_range(0..v)
            } else if pick < self.noise + (1.0 - self.noise) * self.mix {
                Self::draw_row(&self.near[prev1 as usize], u)
            } else {
                Self::draw_row(&self.far[prev2 as usize], u)
            };
            out.push(next);
            prev2 = prev1;
            prev1 = next;
        }
        out
    }

    /// Stationary distribution over pairs `(prev2, prev1)`, flattened as
    /// `prev2 * V + prev1`, by power iteration.
    pub fn stationary_pairs(&self, max_iters: usize, tol: f64) -> Vec<f64> {
        let v = self.vocab_size;
        let mut pi = vec![1.0 / (v * v) as f64; v * v];
        let mut next = vec![0.0; v * v];
        for _ in 0..max_iters {
            next.iter_mut().for_each(|x| *x = 0.0);
            for b in 0..v {
                let mut mass_b = 0.0;
                for a in 0..v {
                    let m = pi[a * v + b];
                    if m == 0.0 {
                        continue;
                    }
                    mass_b += m;
                    for &(c, w) in &self.far[a] {
                        next[b * v + c as usize] += m * (1.0 - self.noise) * (1.0 - self.mix) * w;
                    }
                }
                for &(c, w) in &self.near[b] {
                    next[b * v + c as usize] += mass_b * (1.0 - self.noise) * self.mix * w;
                }
                let floor = mass_b * self.noise / v as f64;
                for c in 0..v {
                    next[b * v + c] += floor;
                }
            }
            let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if diff < tol {
                break;
            }
        }
        pi
    }

    /// Stationary unigram distribution.
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let v = self.vocab_size;
        let pairs = self.stationary_pairs(10_000, 1e-14);
        let mut uni = vec![0.0; v];
        for a in 0..v {
            for b in 0..v {
                uni[b] += pairs[a * v + b];
            }
        }
        uni
    }

    /// Entropy rate in nats per token: the floor any model's cross-entropy
    /// can reach on this source.
    pub fn entropy_rate(&self) -> f64 {
        let v = self.vocab_size;
        let pairs = self.stationary_pairs(10_000, 1e-14);
        let mut h = 0.0;
        for a in 0..v {
            for b in 0..v {
                let m = pairs[a * v + b];
                if m == 0.0 {
                    continue;
                }
                h += m * entropy(&self.conditional(a as u32, b as u32));
            }
        }
        h
    }

    pub fn corpus(&self, root_seed: u64, n_tokens: usize, split: Split) -> Corpus {
        Corpus {
            tokens: self.sample(n_tokens, stage_seed(root_seed, split.label())),
            split,
        }
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Entropy of the empirical unigram distribution of a stream.
pub fn unigram_entropy(tokens: &[u32], vocab_size: usize) -> f64 {
    let mut counts = vec![0usize; vocab_size];
    for &t in tokens {
        counts[t as usize] += 1;
    }
    let n = tokens.len() as f64;
    let p: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
    entropy(&p)
}

/// Training split of the source seeded by `seed`.
pub fn synth_corpus(seed: u64, n_tokens: usize, vocab_size: usize) -> Corpus {
    MarkovSource::new(seed, vocab_size).corpus(seed, n_tokens, Split::Train)
}

pub fn synth_split(seed: u64, n_tokens: usize, vocab_size: usize, split: Split) -> Corpus {
    MarkovSource::new(seed, vocab_size).corpus(seed, n_tokens, split)
}

/// Writes token ids as unsigned 32-bit little-endian.
pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes)
}

pub fn read_tokens(path: impl AsRef<Path>) -> io::Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("token file length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
