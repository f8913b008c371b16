//! Block Influence: one minus the mean cosine similarity between a block's
//! input and output rows. Blocks that barely rotate the residual stream
//! score near zero and are the first to go.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HiddenTrace, Model, ModelError};
use crate::par::*;
use crate::stage_seed;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("trace has no block boundaries")]
    EmptyTrace,
    #[error("every row at block {block} has zero norm")]
    AllRowsZero { block: usize },
    #[error("traces disagree: {0}")]
    Mismatch(String),
    #[error("prune ratio {0} must lie strictly between 0 and 1")]
    RatioOutOfRange(f64),
    #[error("ratio too small for depth: {ratio} x {depth} blocks prunes nothing")]
    RatioTooSmall { ratio: f64, depth: usize },
    #[error("calibration corpus of {len} tokens is shorter than one window of {seq_len}")]
    CorpusTooShort { len: usize, seq_len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiReport {
    pub scores: Vec<f64>,
    /// Rows that entered the average, per block.
    pub rows_averaged: Vec<usize>,
    /// Rows skipped for zero norm, per block.
    pub rows_skipped: Vec<usize>,
    pub calib_seed: Option<u64>,
}

impl BiReport {
    pub fn n_blocks(&self) -> usize {
        self.scores.len()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block_index", "bi_score"])?;
        for (i, s) in self.scores.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the `block_index,bi_score` table back (row counts are not stored).
    pub fn read_csv<R: Read>(input: R) -> Result<BiReport> {
        let mut r = csv::Reader::from_reader(input);
        let mut scores = Vec::new();
        for rec in r.deserialize::<(usize, f64)>() {
            let (i, s) = rec?;
            if i != scores.len() {
                return Err(ScoringError::Mismatch(format!("block index {i} out of order")));
            }
            scores.push(s);
        }
        let n = scores.len();
        Ok(BiReport {
            scores,
            rows_averaged: vec![0; n],
            rows_skipped: vec![0; n],
            calib_seed: None,
        })
    }
}

/// Running sums of cosine similarity, mergeable across calibration sets.
#[derive(Debug, Clone, PartialEq)]
pub struct BiAccumulator {
    cos_sum: Vec<f64>,
    rows: Vec<usize>,
    skipped: Vec<usize>,
}

impl BiAccumulator {
    pub fn new(n_blocks: usize) -> Self {
        BiAccumulator {
            cos_sum: vec![0.0; n_blocks],
            rows: vec![0; n_blocks],
            skipped: vec![0; n_blocks],
        }
    }

    pub fn add_trace(&mut self, trace: &HiddenTrace) -> Result<()> {
        if trace.n_blocks() != self.cos_sum.len() {
            return Err(ScoringError::Mismatch(format!(
                "trace has {} blocks, accumulator {}",
                trace.n_blocks(),
                self.cos_sum.len()
            )));
        }
        for i in 0..trace.n_blocks() {
            let (a, b) = (&trace.states[i], &trace.states[i + 1]);
            if a.shape() != b.shape() {
                return Err(ScoringError::Mismatch(format!("boundary {i} shapes differ")));
            }
            for t in 0..a.rows() {
                let (x, y) = (a.row(t), b.row(t));
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    self.skipped[i] += 1;
                    continue;
                }
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                self.cos_sum[i] += dot / (nx * ny);
                self.rows[i] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BiAccumulator) {
        for i in 0..self.cos_sum.len() {
            self.cos_sum[i] += other.cos_sum[i];
            self.rows[i] += other.rows[i];
            self.skipped[i] += other.skipped[i];
        }
    }

    pub fn finish(&self, calib_seed: Option<u64>) -> Result<BiReport> {
        if self.cos_sum.is_empty() {
            return Err(ScoringError::EmptyTrace);
        }
        let mut scores = Vec::with_capacity(self.cos_sum.len());
        for (i, (&s, &n)) in self.cos_sum.iter().zip(&self.rows).enumerate() {
            if n == 0 {
                return Err(ScoringError::AllRowsZero { block: i });
            }
            // clamp rounding excursions of the cosine outside [-1, 1]
            scores.push((1.0 - s / n as f64).clamp(0.0, 2.0));
        }
        Ok(BiReport {
            scores,
            rows_averaged: self.rows.clone(),
            rows_skipped: self.skipped.clone(),
            calib_seed,
        })
    }
}

/// Block Influence of every block from one hidden-state trace.
pub fn block_influence(trace: &HiddenTrace) -> Result<BiReport> {
    block_influence_many(std::slice::from_ref(trace), None)
}

/// Block Influence averaged uniformly over every row of every trace.
pub fn block_influence_many(traces: &[HiddenTrace], calib_seed: Option<u64>) -> Result<BiReport> {
    let first = traces.first().ok_or(ScoringError::EmptyTrace)?;
    let mut acc = BiAccumulator::new(first.n_blocks());
    for t in traces {
        acc.add_trace(t)?;
    }
    acc.finish(calib_seed)
}

/// Scores `model` on `n_seqs` windows of `seq_len` tokens drawn from a
/// held-out stream with the given seed.
pub fn calibrate(model: &Model, tokens: &[u32], n_seqs: usize, seq_len: usize, seed: u64) -> Result<BiReport> {
    if tokens.len() < seq_len {
        return Err(ScoringError::CorpusTooShort {
            len: tokens.len(),
            seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "bi/calibration"));
    let max_start = tokens.len() - seq_len;
    let starts: Vec<usize> = (0..n_seqs).map(|_| rng.random_range(0..=max_start)).collect();
    let accs: Vec<Result<BiAccumulator>> = starts
        .par_iter()
        .map(|&s| {
            let (_, trace) = model.forward_traced(&tokens[s..s + seq_len])?;
            let mut acc = BiAccumulator::new(trace.n_blocks());
            acc.add_trace(&trace)?;
            Ok(acc)
        })
        .collect();
    let mut total = BiAccumulator::new(model.n_blocks());
    for a in accs {
        total.merge(&a?);
    }
    total.finish(Some(seed))
}

/// The `floor(ratio · depth)` lowest-scoring blocks, ascending by id. Ties
/// go to the lower block index.
pub fn choose_prune_set(report: &BiReport, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ScoringError::RatioOutOfRange(ratio));
    }
    let depth = report.n_blocks();
    // tolerate products like 0.29 * 100 = 28.999999999999996
    let k = (ratio * depth as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(ScoringError::RatioTooSmall { ratio, depth });
    }
    let mut order: Vec<usize> = (0..depth).collect();
    order.sort_by(|&a, &b| report.scores[a].total_cmp(&report.scores[b]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn report(scores: &[f64]) -> BiReport {
        BiReport {
            scores: scores.to_vec(),
            rows_averaged: vec![1; scores.len()],
            rows_skipped: vec![0; scores.len()],
            calib_seed: None,
        }
    }

    fn trace(states: Vec<Matrix>) -> HiddenTrace {
        HiddenTrace { states }
    }

    #[test]
    fn analytic_cases() {
        let x = Matrix::from_fn(5, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.3));
        assert_eq!(block_influence(&trace(vec![x.clone(), x.clone()])).unwrap().scores, vec![0.0]);
        let neg = block_influence(&trace(vec![x.clone(), x.scale(-1.0)])).unwrap();
        assert!((neg.scores[0] - 2.0).abs() <= 1e-12);
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 3.0], &[-1.0, 0.0]]).unwrap();
        assert!((block_influence(&trace(vec![a, b])).unwrap().scores[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_rows_are_skipped_then_fatal() {
        let mut a = Matrix::from_fn(3, 2, |i, j| (i + j + 1) as f64);
        a.row_mut(1).fill(0.0);
        let r = block_influence(&trace(vec![a.clone(), a.clone()])).unwrap();
        assert_eq!(r.rows_averaged, vec![2]);
        assert_eq!(r.rows_skipped, vec![1]);
        let z = Matrix::zeros(3, 2);
        assert!(matches!(
            block_influence(&trace(vec![z.clone(), z])),
            Err(ScoringError::AllRowsZero { block: 0 })
        ));
    }

    #[test]
    fn prune_set_examples() {
        assert_eq!(choose_prune_set(&report(&[0.9, 0.1, 0.5, 0.2]), 0.5).unwrap(), vec![1, 3]);
        assert_eq!(choose_prune_set(&report(&[0.3; 8]), 0.25).unwrap(), vec![0, 1]);
        assert_eq!(choose_prune_set(&report(&[0.3; 32]), 0.3).unwrap().len(), 9);
        assert!(matches!(
            choose_prune_set(&report(&[0.3; 3]), 0.2),
            Err(ScoringError::RatioTooSmall { .. })
        ));
        assert!(matches!(choose_prune_set(&report(&[0.3; 3]), 1.0), Err(ScoringError::RatioOutOfRange(_))));
    }

    #[test]
    fn csv_round_trip() {
        let r = report(&[0.125, 1.0 / 3.0, 1.9999999]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = BiReport::read_csv(&buf[..]).unwrap();
        assert_eq!(back.scores, r.scores);
    }
}
