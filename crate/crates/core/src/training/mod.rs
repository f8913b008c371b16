//! Backpropagation, Adam and the fine-tuning loop.

mod backprop;
pub mod corpus;
mod optim;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference;
use crate::model::{Model, ModelError};
use crate::stage_seed;

pub use backprop::{batch_loss, loss_and_grads, Grads};
pub use corpus::{synth_corpus, synth_split, Corpus, MarkovSource, Split};
pub use optim::{adam_update, Adam, Trainable, BETA1, BETA2, EPS};

/// Fine-tuning aborts once a step loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {loss} (step {step:?})")]
    NonFiniteLoss { step: Option<usize>, loss: f64 },
    #[error("training diverged at step {step}: loss {loss} (recent losses {recent:?})")]
    Diverged { step: usize, loss: f64, recent: Vec<f64> },
    #[error("batch has no next-token targets (sequence length < 2)")]
    NoTargets,
    #[error("corpus of {len} tokens is too short for windows of {seq_len}")]
    CorpusTooShort { len: usize, seq_len: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub trainable: Trainable,
    /// Validation perplexity is measured every this many steps (0 = only at
    /// the start and the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            steps: 5000,
            batch_size: 16,
            seq_len: 64,
            seed: 0,
            schedule: Schedule::Cosine,
            trainable: Trainable::All,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(TrainError::InvalidConfig("batch_size >= 1 and seq_len >= 2 required".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub valid_ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss of each step, in nats.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

impl TrainLog {
    pub fn final_ppl(&self) -> Option<f64> {
        self.evals.last().map(|e| e.valid_ppl)
    }

    pub fn start_ppl(&self) -> Option<f64> {
        self.evals.first().map(|e| e.valid_ppl)
    }

    /// `step,train_loss,valid_ppl`; step 0 is the pre-training evaluation
    /// and step `k` the loss of the k-th update.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss", "valid_ppl"])?;
        let ppl_at = |s: usize| {
            self.evals
                .iter()
                .find(|e| e.step == s)
                .map(|e| e.valid_ppl.to_string())
                .unwrap_or_default()
        };
        w.write_record(["0".to_string(), String::new(), ppl_at(0)])?;
        for (i, l) in self.losses.iter().enumerate() {
            let step = i + 1;
            w.write_record([step.to_string(), l.to_string(), ppl_at(step)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Deterministic stream of training windows.
pub struct BatchSampler<'a> {
    tokens: &'a [u32],
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a Corpus, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if corpus.len() < seq_len {
            return Err(TrainError::CorpusTooShort {
                len: corpus.len(),
                seq_len,
            });
        }
        Ok(BatchSampler {
            tokens: &corpus.tokens,
            seq_len,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(stage_seed(seed, "batches")),
        })
    }

    pub fn next_batch(&mut self) -> Vec<&'a [u32]> {
        let max_start = self.tokens.len() - self.seq_len;
        (0..self.batch_size)
            .map(|_| {
                let s = self.rng.random_range(0..=max_start);
                &self.tokens[s..s + self.seq_len]
            })
            .collect()
    }
}

/// Trains `model` in place. Validation perplexity (when a validation corpus
/// is given) is logged before the first step, every `eval_every` steps and
/// after the last step.
pub fn finetune(model: &mut Model, train: &Corpus, valid: Option<&Corpus>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    let eval = |m: &Model, step: usize, log: &mut TrainLog| -> Result<()> {
        if let Some(v) = valid {
            let ppl = inference::perplexity(m, &v.tokens, cfg.seq_len)?;
            log.evals.push(EvalPoint { step, valid_ppl: ppl });
        }
        Ok(())
    };
    eval(model, 0, &mut log)?;
    if cfg.steps == 0 {
        return Ok(log);
    }
    let mut sampler = BatchSampler::new(train, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let mut opt = Adam::new(model);
    for step in 1..=cfg.steps {
        let batch = sampler.next_batch();
        let (loss, grads) = match loss_and_grads(model, &batch) {
            Err(TrainError::NonFiniteLoss { loss, .. }) => {
                return Err(TrainError::NonFiniteLoss { step: Some(step), loss })
            }
            other => other?,
        };
        log.losses.push(loss);
        if loss > DIVERGENCE_LOSS {
            let from = log.losses.len().saturating_sub(10);
            return Err(TrainError::Diverged {
                step,
                loss,
                recent: log.losses[from..].to_vec(),
            });
        }
        opt.step(model, &grads, cfg.lr_at(step - 1), cfg.trainable);
        let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if periodic || step == cfg.steps {
            eval(model, step, &mut log)?;
        }
    }
    Ok(log)
}

impl From<inference::InferenceError> for TrainError {
    fn from(e: inference::InferenceError) -> Self {
        match e {
            inference::InferenceError::Model(m) => TrainError::Model(m),
            other => TrainError::InvalidConfig(other.to_string()),
        }
    }
}
