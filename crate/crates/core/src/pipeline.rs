//! End-to-end runs driven by a flat `key = value` config file.
//!
//! Every stage draws its randomness from `stage_seed(seed, label)` with a
//! fixed label, so one config reproduces every artifact byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{self, InferenceError};
use crate::model::{save_checkpoint, CheckpointError, Model, ModelConfig, ModelError};
use crate::scoring::{self, BiReport, ScoringError};
use crate::selection::{self, DistanceMetricKind, SelectionError, SelectionReport};
use crate::stage_seed;
use crate::surgery::{self, AdapterInit, ExtensionPattern, ExtensionSpec, ReplaceOptions, SurgeryError, SurgerySummary};
use crate::training::{self, Corpus, MarkovSource, Schedule, Split, TrainConfig, TrainError, TrainLog, Trainable};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {message}")]
    BadValue { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    /// Base-model training.
    pub train: TrainConfig,
    pub calib_seqs: usize,
    pub prune_ratio: f64,
    pub metric: DistanceMetricKind,
    /// Adapter and metric rank; `None` means `d_model / 8`.
    pub rank: Option<usize>,
    pub gamma_init: f64,
    pub adapter_init: AdapterInit,
    /// Recovery fine-tuning after surgery.
    pub recover: TrainConfig,
    pub extension: Option<ExtensionSpec>,
    pub draft_k: usize,
    pub decode_tokens: usize,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            model: ModelConfig::toy(),
            train_tokens: 500_000,
            valid_tokens: 16_384,
            train: TrainConfig::default(),
            calib_seqs: 64,
            prune_ratio: 0.25,
            metric: DistanceMetricKind::Proposed,
            rank: None,
            gamma_init: surgery::DEFAULT_GAMMA_INIT,
            adapter_init: AdapterInit::Svd,
            recover: TrainConfig {
                lr: 1e-3,
                steps: 1000,
                eval_every: 0,
                ..TrainConfig::default()
            },
            extension: None,
            draft_k: 4,
            decode_tokens: 64,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("'{value}': {e}"),
    })
}

fn parse_schedule(key: &str, value: &str) -> std::result::Result<Schedule, ConfigError> {
    match value {
        "cosine" => Ok(Schedule::Cosine),
        "constant" => Ok(Schedule::Constant),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            message: format!("'{value}' (expected cosine or constant)"),
        }),
    }
}

fn parse_trainable(key: &str, value: &str) -> std::result::Result<Trainable, ConfigError> {
    match value {
        "all" => Ok(Trainable::All),
        "shared-only" => Ok(Trainable::AdaptersNormsBases),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            message: format!("'{value}' (expected all or shared-only)"),
        }),
    }
}

fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Cosine => "cosine",
        Schedule::Constant => "constant",
    }
}

fn trainable_name(t: Trainable) -> &'static str {
    match t {
        Trainable::All => "all",
        Trainable::AdaptersNormsBases => "shared-only",
    }
}

fn pattern_name(p: ExtensionPattern) -> &'static str {
    match p {
        ExtensionPattern::Block => "block",
        ExtensionPattern::Sequential => "sequential",
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::parse(&text)?)
    }

    fn extension_mut(&mut self) -> &mut ExtensionSpec {
        let gamma = self.gamma_init;
        self.extension.get_or_insert(ExtensionSpec {
            start: 0,
            end: 0,
            repeats: 1,
            pattern: ExtensionPattern::Block,
            gamma_init: gamma,
            rank: 0,
            seed: 0,
        })
    }

    /// Sets one key; command-line overrides go through here too.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), ConfigError> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "n_layers" => self.model.n_layers = parse_value(key, v)?,
            "d_model" => self.model.d_model = parse_value(key, v)?,
            "n_heads" => self.model.n_heads = parse_value(key, v)?,
            "d_ff" => self.model.d_ff = parse_value(key, v)?,
            "vocab_size" => self.model.vocab_size = parse_value(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse_value(key, v)?,
            "norm_eps" => self.model.norm_eps = parse_value(key, v)?,
            "train_tokens" => self.train_tokens = parse_value(key, v)?,
            "valid_tokens" => self.valid_tokens = parse_value(key, v)?,
            "lr" => self.train.lr = parse_value(key, v)?,
            "steps" => self.train.steps = parse_value(key, v)?,
            "batch_size" => {
                self.train.batch_size = parse_value(key, v)?;
                self.recover.batch_size = self.train.batch_size;
            }
            "seq_len" => {
                self.train.seq_len = parse_value(key, v)?;
                self.recover.seq_len = self.train.seq_len;
            }
            "schedule" => {
                self.train.schedule = parse_schedule(key, v)?;
                self.recover.schedule = self.train.schedule;
            }
            "eval_every" => self.train.eval_every = parse_value(key, v)?,
            "calib_seqs" => self.calib_seqs = parse_value(key, v)?,
            "prune_ratio" => self.prune_ratio = parse_value(key, v)?,
            "metric" => self.metric = parse_value(key, v)?,
            "rank" => self.rank = Some(parse_value(key, v)?),
            "gamma_init" => self.gamma_init = parse_value(key, v)?,
            "adapter_init" => self.adapter_init = parse_value(key, v)?,
            "finetune_steps" => self.recover.steps = parse_value(key, v)?,
            "finetune_lr" => self.recover.lr = parse_value(key, v)?,
            "finetune_eval_every" => self.recover.eval_every = parse_value(key, v)?,
            "trainable" => self.recover.trainable = parse_trainable(key, v)?,
            "ext_start" => self.extension_mut().start = parse_value(key, v)?,
            "ext_end" => self.extension_mut().end = parse_value(key, v)?,
            "ext_repeats" => self.extension_mut().repeats = parse_value(key, v)?,
            "ext_pattern" => self.extension_mut().pattern = parse_value(key, v)?,
            "draft_k" => self.draft_k = parse_value(key, v)?,
            "decode_tokens" => self.decode_tokens = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Every key with its effective value, in `parse`-able form.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("norm_eps", m.norm_eps.to_string());
        kv("train_tokens", self.train_tokens.to_string());
        kv("valid_tokens", self.valid_tokens.to_string());
        kv("lr", self.train.lr.to_string());
        kv("steps", self.train.steps.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("seq_len", self.train.seq_len.to_string());
        kv("schedule", schedule_name(self.train.schedule).to_string());
        kv("eval_every", self.train.eval_every.to_string());
        kv("calib_seqs", self.calib_seqs.to_string());
        kv("prune_ratio", self.prune_ratio.to_string());
        kv("metric", self.metric.to_string());
        kv("rank", self.rank().to_string());
        kv("gamma_init", self.gamma_init.to_string());
        kv("adapter_init", self.adapter_init.to_string());
        kv("finetune_steps", self.recover.steps.to_string());
        kv("finetune_lr", self.recover.lr.to_string());
        kv("finetune_eval_every", self.recover.eval_every.to_string());
        kv("trainable", trainable_name(self.recover.trainable).to_string());
        if let Some(e) = &self.extension {
            kv("ext_start", e.start.to_string());
            kv("ext_end", e.end.to_string());
            kv("ext_repeats", e.repeats.to_string());
            kv("ext_pattern", pattern_name(e.pattern).to_string());
        }
        kv("draft_k", self.draft_k.to_string());
        kv("decode_tokens", self.decode_tokens.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.prune_ratio > 0.0 && self.prune_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!("prune_ratio {} not in (0, 1)", self.prune_ratio)));
        }
        if !(self.gamma_init.is_finite() && self.gamma_init >= 0.0) {
            return Err(ConfigError::Invalid(format!("gamma_init {} must be >= 0", self.gamma_init)));
        }
        if self.rank() == 0 {
            return Err(ConfigError::Invalid("rank must be >= 1".into()));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return Err(ConfigError::Invalid(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.model.vocab_size < 4 {
            return Err(ConfigError::Invalid("the synthetic corpus needs vocab_size >= 4".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or((self.model.d_model / 8).max(1))
    }

    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, "train/base"),
            ..self.train
        }
    }

    pub fn recover_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, "train/recover"),
            ..self.recover
        }
    }

    pub fn source(&self) -> MarkovSource {
        MarkovSource::new(stage_seed(self.seed, "corpus"), self.model.vocab_size)
    }

    pub fn corpora(&self) -> (Corpus, Corpus) {
        let src = self.source();
        let root = stage_seed(self.seed, "corpus");
        (
            src.corpus(root, self.train_tokens, Split::Train),
            src.corpus(root, self.valid_tokens, Split::Valid),
        )
    }

    pub fn replace_options(&self, gamma_init: f64, adapter_init: AdapterInit) -> ReplaceOptions {
        ReplaceOptions {
            rank: self.rank(),
            gamma_init,
            adapter_init,
            seed: stage_seed(self.seed, "surgery"),
        }
    }

    pub fn extension_spec(&self) -> Option<ExtensionSpec> {
        self.extension.map(|e| ExtensionSpec {
            gamma_init: self.gamma_init,
            rank: self.rank(),
            seed: stage_seed(self.seed, "surgery/extend"),
            ..e
        })
    }
}

pub fn train_base(cfg: &PipelineConfig, train: &Corpus, valid: &Corpus) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::init_random(cfg.model, stage_seed(cfg.seed, "model/init"))?;
    let log = training::finetune(&mut model, train, Some(valid), &cfg.base_train_config())?;
    Ok((model, log))
}

pub fn bi_score(cfg: &PipelineConfig, model: &Model, calib: &Corpus) -> Result<BiReport> {
    Ok(scoring::calibrate(
        model,
        &calib.tokens,
        cfg.calib_seqs,
        cfg.train.seq_len,
        stage_seed(cfg.seed, "bi/calibration"),
    )?)
}

pub fn select(cfg: &PipelineConfig, model: &Model, bi: &BiReport, metric: DistanceMetricKind) -> Result<SelectionReport> {
    let pruned = scoring::choose_prune_set(bi, cfg.prune_ratio)?;
    Ok(selection::select_bases_in(model, &pruned, cfg.rank(), metric)?)
}

/// Validation perplexity at the training window length.
pub fn valid_ppl(cfg: &PipelineConfig, model: &Model, valid: &Corpus) -> Result<f64> {
    Ok(inference::perplexity(model, &valid.tokens, cfg.train.seq_len)?)
}

/// Paths of everything [`run`] writes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunArtifacts {
    pub files: Vec<PathBuf>,
    pub base_ppl: f64,
    pub pruned_start_ppl: f64,
    pub recovered_ppl: f64,
}

/// Train, score, select, replace and recover, writing every artifact under
/// `cfg.out_dir`.
pub fn run(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        files.push(p);
        Ok(())
    };
    put("config.txt", cfg.render().into_bytes())?;
    let (train, valid) = cfg.corpora();
    let (base, base_log) = train_base(cfg, &train, &valid)?;
    put("base.ckpt", checkpoint_bytes(&base)?)?;
    put("base_loss.csv", log_csv(&base_log)?)?;

    let bi = bi_score(cfg, &base, &valid)?;
    let mut buf = Vec::new();
    bi.write_csv(&mut buf)?;
    put("bi.csv", buf)?;

    let sel = select(cfg, &base, &bi, cfg.metric)?;
    put("selection.json", sel.to_json().into_bytes())?;
    let mut buf = Vec::new();
    selection::write_distance_csv(&sel, &mut buf)?;
    put(&format!("distances_{}.csv", cfg.metric), buf)?;

    let (mut pruned, summary) = surgery::prune_and_replace(&base, &sel, &cfg.replace_options(cfg.gamma_init, cfg.adapter_init))?;
    put("pruned.ckpt", checkpoint_bytes(&pruned)?)?;
    put("surgery.json", summary.to_json().into_bytes())?;
    let start = valid_ppl(cfg, &pruned, &valid)?;
    let log = training::finetune(&mut pruned, &train, Some(&valid), &cfg.recover_config())?;
    put("recovered.ckpt", checkpoint_bytes(&pruned)?)?;
    put("recover_loss.csv", log_csv(&log)?)?;
    Ok(RunArtifacts {
        files,
        base_ppl: base_log.final_ppl().unwrap_or(f64::NAN),
        pruned_start_ppl: start,
        recovered_ppl: log.final_ppl().unwrap_or(f64::NAN),
    })
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    crate::model::write_checkpoint(model, &mut buf)?;
    Ok(buf)
}

pub fn log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    Ok(buf)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(save_checkpoint(model, path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metric: DistanceMetricKind,
    pub gamma_init: f64,
    pub adapter_init: AdapterInit,
    pub bases: Vec<(usize, usize)>,
    pub start_ppl: f64,
    pub final_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub pruned: Vec<usize>,
    pub base_ppl: f64,
    pub rows: Vec<AblationRow>,
    /// Plain deletion with the same recovery budget, for reference.
    pub delete_only: AblationRow,
}

impl AblationReport {
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "metric", "gamma_init", "adapter_init", "start_ppl", "final_ppl"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.metric.to_string(),
                r.gamma_init.to_string(),
                r.adapter_init.to_string(),
                r.start_ppl.to_string(),
                r.final_ppl.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// One leg: replace with the given settings, measure, recover, measure.
pub fn replace_and_recover(
    cfg: &PipelineConfig,
    base: &Model,
    selection: &SelectionReport,
    gamma_init: f64,
    adapter_init: AdapterInit,
    train: &Corpus,
    valid: &Corpus,
) -> Result<(Model, SurgerySummary, f64, TrainLog)> {
    let (mut m, summary) = surgery::prune_and_replace(base, selection, &cfg.replace_options(gamma_init, adapter_init))?;
    let start = valid_ppl(cfg, &m, valid)?;
    let log = training::finetune(&mut m, train, Some(valid), &cfg.recover_config())?;
    Ok((m, summary, start, log))
}

/// The four replacement variants (full method, raw-weight metric, output
/// norm with unit gain, zero-product adapters) plus plain deletion, all
/// from the same base model, prune set and recovery budget.
pub fn ablation_suite(cfg: &PipelineConfig, base: &Model, train: &Corpus, valid: &Corpus) -> Result<AblationReport> {
    cfg.validate()?;
    let bi = bi_score(cfg, base, valid)?;
    let pruned = scoring::choose_prune_set(&bi, cfg.prune_ratio)?;
    let variants = [
        ("full", DistanceMetricKind::Proposed, cfg.gamma_init, AdapterInit::Svd),
        ("no-high-rank-prune", DistanceMetricKind::NoHighRankPrune, cfg.gamma_init, AdapterInit::Svd),
        ("no-output-norm", DistanceMetricKind::Proposed, 1.0, AdapterInit::Svd),
        ("no-svd-init", DistanceMetricKind::Proposed, cfg.gamma_init, AdapterInit::ZeroProduct),
    ];
    let mut rows = Vec::new();
    for (name, metric, gamma, init) in variants {
        let sel = selection::select_bases_in(base, &pruned, cfg.rank(), metric)?;
        let (_, _, start, log) = replace_and_recover(cfg, base, &sel, gamma, init, train, valid)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            metric,
            gamma_init: gamma,
            adapter_init: init,
            bases: sel.chosen.iter().map(|(a, b)| (*a, *b)).collect(),
            start_ppl: start,
            final_ppl: log.final_ppl().unwrap_or(f64::NAN),
        });
    }
    let mut deleted = surgery::delete_blocks(base, &pruned)?;
    let start = valid_ppl(cfg, &deleted, valid)?;
    let log = training::finetune(&mut deleted, train, Some(valid), &cfg.recover_config())?;
    Ok(AblationReport {
        pruned,
        base_ppl: valid_ppl(cfg, base, valid)?,
        rows,
        delete_only: AblationRow {
            variant: "delete-only".into(),
            metric: cfg.metric,
            gamma_init: 0.0,
            adapter_init: cfg.adapter_init,
            bases: Vec::new(),
            start_ppl: start,
            final_ppl: log.final_ppl().unwrap_or(f64::NAN),
        },
    })
}
