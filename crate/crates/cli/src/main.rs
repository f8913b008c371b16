use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blockshare::inference::{self, DecodeConfig, DecodeMode};
use blockshare::model::load_checkpoint;
use blockshare::pipeline::{self, write_file, ConfigError, PipelineConfig, PipelineError};
use blockshare::scoring::{self, BiReport};
use blockshare::selection::{self, DistanceMetricKind, SelectionReport};
use blockshare::surgery::{self, AdapterInit, ExtensionPattern, ExtensionSpec};
use blockshare::training::{self, corpus::read_tokens, Trainable};
use blockshare::{stage_seed, Model};

#[derive(Parser)]
#[command(name = "blockshare", version, about = "Depth pruning with weight-shared replacement blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the synthetic corpus.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block Influence of every block.
    BiScore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        calib_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose a base for every pruned block and write the distance tables.
    SelectBases {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        metric: Option<DistanceMetricKind>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        prune_ratio: Option<f64>,
        /// Scores from `bi-score`; computed on the fly when absent.
        #[arg(long)]
        bi: Option<PathBuf>,
        /// Directory for `selection.json` and the per-metric distance CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace pruned blocks by shared blocks.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        gamma_init: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        adapter_init: Option<AdapterInit>,
        /// Remove the pruned blocks instead of replacing them.
        #[arg(long)]
        delete_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert repeated blocks.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2, required = true, value_names = ["START", "END"])]
        range: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value = "block")]
        pattern: ExtensionPattern,
        #[arg(long)]
        gamma_init: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovery fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        trainable: Option<TrainableArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "valid")]
        split: SplitArg,
    },
    /// Greedy or self-speculative decoding.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt token ids, unsigned 32-bit little-endian.
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value = "spec")]
        mode: ModeArg,
        #[arg(long)]
        draft_k: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation suites.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Suite,
        /// Base model; trained from the config when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, score, select, replace and recover in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainableArg {
    All,
    SharedOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Spec,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Table4,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(UsageError(format!("--set expects KEY=VALUE, got '{kv}'")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

/// `foo.ckpt` → `foo.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBase { common, out } => {
            let cfg = load_config(&common)?;
            let (train, valid) = cfg.corpora();
            let (model, log) = pipeline::train_base(&cfg, &train, &valid)?;
            pipeline::save_model(&model, &out)?;
            write_file(&sibling(&out, "loss.csv"), &pipeline::log_csv(&log)?)?;
            if let Some(ppl) = log.final_ppl() {
                println!("valid_ppl {ppl}");
            }
        }
        Command::BiScore {
            common,
            ckpt,
            calib_seed,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = load(&ckpt)?;
            let (_, valid) = cfg.corpora();
            let seed = calib_seed.unwrap_or_else(|| stage_seed(cfg.seed, "bi/calibration"));
            let report = scoring::calibrate(&model, &valid.tokens, cfg.calib_seqs, cfg.train.seq_len, seed)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_file(&out, &buf)?;
        }
        Command::SelectBases {
            common,
            ckpt,
            metric,
            rank,
            prune_ratio,
            bi,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = metric {
                cfg.metric = m;
            }
            if let Some(r) = rank {
                cfg.rank = Some(r);
            }
            if let Some(p) = prune_ratio {
                cfg.prune_ratio = p;
            }
            let model = load(&ckpt)?;
            let report = match bi {
                Some(p) => BiReport::read_csv(std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?)?,
                None => pipeline::bi_score(&cfg, &model, &cfg.corpora().1)?,
            };
            let pruned = scoring::choose_prune_set(&report, cfg.prune_ratio)?;
            let mut chosen = None;
            for kind in DistanceMetricKind::ALL {
                let sel = selection::select_bases_in(&model, &pruned, cfg.rank(), kind)?;
                let mut buf = Vec::new();
                selection::write_distance_csv(&sel, &mut buf)?;
                write_file(&out.join(format!("distances_{kind}.csv")), &buf)?;
                if kind == cfg.metric {
                    chosen = Some(sel);
                }
            }
            let sel = chosen.expect("every metric is scored");
            write_file(&out.join("selection.json"), sel.to_json().as_bytes())?;
            for (i, j) in &sel.chosen {
                println!("block {i} -> base {j}");
            }
        }
        Command::Prune {
            common,
            ckpt,
            selection,
            gamma_init,
            rank,
            adapter_init,
            delete_only,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(r) = rank {
                cfg.rank = Some(r);
            }
            let model = load(&ckpt)?;
            let text = std::fs::read_to_string(&selection).with_context(|| format!("reading {}", selection.display()))?;
            let sel = SelectionReport::from_json(&text).context("parsing selection report")?;
            if delete_only {
                let pruned = surgery::delete_blocks(&model, &sel.pruned)?;
                pipeline::save_model(&pruned, &out)?;
                return Ok(());
            }
            let opts = cfg.replace_options(gamma_init.unwrap_or(cfg.gamma_init), adapter_init.unwrap_or(cfg.adapter_init));
            let (replaced, summary) = surgery::prune_and_replace(&model, &sel, &opts)?;
            pipeline::save_model(&replaced, &out)?;
            write_file(&sibling(&out, "surgery.json"), summary.to_json().as_bytes())?;
        }
        Command::Extend {
            common,
            ckpt,
            range,
            repeats,
            pattern,
            gamma_init,
            rank,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = load(&ckpt)?;
            let spec = ExtensionSpec {
                start: range[0],
                end: range[1],
                repeats,
                pattern,
                gamma_init: gamma_init.unwrap_or(cfg.gamma_init),
                rank: rank.unwrap_or(cfg.rank()),
                seed: stage_seed(cfg.seed, "surgery/extend"),
            };
            let (extended, summary) = surgery::extend(&model, &spec)?;
            pipeline::save_model(&extended, &out)?;
            write_file(&sibling(&out, "surgery.json"), summary.to_json().as_bytes())?;
        }
        Command::Finetune {
            common,
            ckpt,
            steps,
            trainable,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.recover.steps = s;
            }
            if let Some(t) = trainable {
                cfg.recover.trainable = match t {
                    TrainableArg::All => Trainable::All,
                    TrainableArg::SharedOnly => Trainable::AdaptersNormsBases,
                };
            }
            let mut model = load(&ckpt)?;
            let (train, valid) = cfg.corpora();
            let log = training::finetune(&mut model, &train, Some(&valid), &cfg.recover_config())?;
            pipeline::save_model(&model, &out)?;
            write_file(&sibling(&out, "loss.csv"), &pipeline::log_csv(&log)?)?;
            if let Some(ppl) = log.final_ppl() {
                println!("valid_ppl {ppl}");
            }
        }
        Command::Eval { common, ckpt, split } => {
            let cfg = load_config(&common)?;
            let model = load(&ckpt)?;
            let (train, valid) = cfg.corpora();
            let corpus = match split {
                SplitArg::Train => train,
                SplitArg::Valid => valid,
            };
            println!("{}", pipeline::valid_ppl(&cfg, &model, &corpus)?);
        }
        Command::Decode {
            common,
            ckpt,
            prompt_file,
            mode,
            draft_k,
            max_new_tokens,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = load(&ckpt)?;
            let prompt = read_tokens(&prompt_file).with_context(|| format!("reading {}", prompt_file.display()))?;
            let dc = DecodeConfig {
                max_new_tokens: max_new_tokens.unwrap_or(cfg.decode_tokens),
                draft_k: draft_k.unwrap_or(cfg.draft_k),
                mode: match mode {
                    ModeArg::Greedy => DecodeMode::Greedy,
                    ModeArg::Spec => DecodeMode::Speculative,
                },
            };
            let transcript = inference::decode(&model, &prompt, &dc)?;
            match out {
                Some(p) => write_json(&p, &transcript)?,
                None => println!("{}", serde_json::to_string_pretty(&transcript)?),
            }
        }
        Command::Ablate {
            common,
            suite: Suite::Table4,
            ckpt,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (train, valid) = cfg.corpora();
            let base = match ckpt {
                Some(p) => load(&p)?,
                None => pipeline::train_base(&cfg, &train, &valid)?.0,
            };
            let report = pipeline::ablation_suite(&cfg, &base, &train, &valid)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_file(&out.join("table4.csv"), &buf)?;
            write_json(&out.join("table4.json"), &report)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Run { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let arts = pipeline::run(&cfg)?;
            println!(
                "base {:.4}  pruned-start {:.4}  recovered {:.4}",
                arts.base_ppl, arts.pruned_start_ppl, arts.recovered_ppl
            );
        }
    }
    Ok(())
}

/// Bad config files and overrides count as usage errors.
fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)))
            || c.downcast_ref::<UsageError>().is_some()
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
