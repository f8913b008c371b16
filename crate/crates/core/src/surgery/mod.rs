//! Block replacement and model extension.
//!
//! Pruned blocks become `Shared` blocks that borrow a surviving block's
//! projections, add a low-rank correction per role and damp both sublayer
//! outputs with a small-gain output norm. Extension inserts `Repeated`
//! copies of existing blocks the same way.

pub mod norm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::model::{BlockKind, Model, ModelError, Role, SharedBlock};
use crate::selection::SelectionReport;
use crate::stage_seed;

pub use norm::{output_norm_apply, LoraAdapter, OutputNorm};

pub const DEFAULT_GAMMA_INIT: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("block {block} cannot use {base} as its base: {reason}")]
    DanglingBase { block: usize, base: usize, reason: &'static str },
    #[error("block {0} is not native")]
    NotNative(usize),
    #[error("invalid extension range [{start}, {end}] for {n_blocks} blocks")]
    BadRange { start: usize, end: usize, n_blocks: usize },
    #[error("gamma_init must be finite and >= 0, got {0}")]
    InvalidGamma(f64),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
}

pub type Result<T> = std::result::Result<T, SurgeryError>;

/// How replacement adapters start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterInit {
    /// Truncated SVD of the raw difference `W_i − W_j`.
    #[default]
    Svd,
    /// Truncated SVD of the difference of the two rank-r reconstructions.
    SvdOfReconstructions,
    /// `a = 0`, `b` small random.
    ZeroProduct,
}

impl AdapterInit {
    pub fn name(self) -> &'static str {
        match self {
            AdapterInit::Svd => "svd",
            AdapterInit::SvdOfReconstructions => "svd-hats",
            AdapterInit::ZeroProduct => "zero-product",
        }
    }
}

impl fmt::Display for AdapterInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "svd" => Ok(AdapterInit::Svd),
            "svd-hats" => Ok(AdapterInit::SvdOfReconstructions),
            "zero-product" => Ok(AdapterInit::ZeroProduct),
            other => Err(format!("unknown adapter init '{other}' (expected svd, svd-hats or zero-product)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaceOptions {
    pub rank: usize,
    pub gamma_init: f64,
    pub adapter_init: AdapterInit,
    /// Only used by zero-product adapters.
    pub seed: u64,
}

impl ReplaceOptions {
    pub fn new(rank: usize, gamma_init: f64) -> Self {
        ReplaceOptions {
            rank,
            gamma_init,
            adapter_init: AdapterInit::Svd,
            seed: 0,
        }
    }
}

/// Best rank-`r` correction taking `wj` towards `wi`.
pub fn init_adapters(wi: &linalg::Matrix, wj: &linalg::Matrix, r: usize) -> Result<LoraAdapter> {
    Ok(LoraAdapter::from_difference(wi, wj, r)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgerySummary {
    pub operation: String,
    pub pruned: Vec<usize>,
    /// Replaced (or inserted) position → base position in the output model.
    pub bases: BTreeMap<usize, usize>,
    pub rank: usize,
    pub gamma_init: f64,
    pub adapter_init: AdapterInit,
    /// Per replaced block, `‖(W_i − W_j) − A·B‖_F` for q, k, v, o, up, down.
    pub residual_norms: BTreeMap<usize, [f64; 6]>,
    pub params_before: usize,
    pub params_after: usize,
    pub param_delta: i64,
}

impl SurgerySummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn check_gamma(g: f64) -> Result<()> {
    if g.is_finite() && g >= 0.0 {
        Ok(())
    } else {
        Err(SurgeryError::InvalidGamma(g))
    }
}

/// Replaces each pruned block `i` (a key of `bases`) by a `Shared` block
/// built on `bases[i]`. Depth is unchanged; the pruned weights are dropped.
pub fn replace_blocks(model: &Model, bases: &BTreeMap<usize, usize>, opts: &ReplaceOptions) -> Result<(Model, SurgerySummary)> {
    check_gamma(opts.gamma_init)?;
    if opts.rank == 0 {
        return Err(SurgeryError::Zero("rank"));
    }
    let n = model.n_blocks();
    for (&i, &j) in bases {
        if i >= n {
            return Err(ModelError::NoSuchBlock(i).into());
        }
        let reason = if j >= n {
            Some("no such block")
        } else if bases.contains_key(&j) {
            Some("base is itself pruned")
        } else if model.blocks[j].native().is_none() {
            Some("base is not native")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(SurgeryError::DanglingBase { block: i, base: j, reason });
        }
        if model.blocks[i].native().is_none() {
            return Err(SurgeryError::NotNative(i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(opts.seed, "surgery/zero-product"));
    let d = model.config.d_model;
    let eps = model.config.norm_eps;
    let mut out = model.clone();
    let mut residual_norms = BTreeMap::new();
    for (&i, &j) in bases {
        let wi = model.blocks[i].native().expect("checked above");
        let wj = model.blocks[j].native().expect("checked above");
        let mut adapters = Vec::with_capacity(6);
        let mut residuals = [0.0; 6];
        for role in Role::ALL {
            let (a, b) = (wi.role(role), wj.role(role));
            let adapter = match opts.adapter_init {
                AdapterInit::Svd => LoraAdapter::from_difference(a, b, opts.rank)?,
                AdapterInit::SvdOfReconstructions => {
                    let ha = linalg::low_rank(a, opts.rank)?.product();
                    let hb = linalg::low_rank(b, opts.rank)?.product();
                    LoraAdapter::from_difference(&ha, &hb, opts.rank)?
                }
                AdapterInit::ZeroProduct => {
                    let max = a.rows().min(a.cols());
                    if opts.rank > max {
                        return Err(LinalgError::RankOutOfRange { rank: opts.rank, max }.into());
                    }
                    LoraAdapter::zero_product(a.rows(), a.cols(), opts.rank, &mut rng)
                }
            };
            residuals[role.index()] = a.sub(b)?.sub(&adapter.delta())?.frobenius_norm();
            adapters.push(adapter);
        }
        residual_norms.insert(i, residuals);
        out.blocks[i] = BlockKind::Shared(SharedBlock {
            base_index: j,
            adapters: adapters.try_into().expect("six roles"),
            attn_norm: OutputNorm::new(d, opts.gamma_init, eps),
            mlp_norm: OutputNorm::new(d, opts.gamma_init, eps),
        });
    }
    out.validate()?;
    let before = model.count_params().total;
    let after = out.count_params().total;
    let summary = SurgerySummary {
        operation: "prune-replace".into(),
        pruned: bases.keys().copied().collect(),
        bases: bases.clone(),
        rank: opts.rank,
        gamma_init: opts.gamma_init,
        adapter_init: opts.adapter_init,
        residual_norms,
        params_before: before,
        params_after: after,
        param_delta: after as i64 - before as i64,
    };
    Ok((out, summary))
}

/// Replacement driven by a base-selection report.
pub fn prune_and_replace(model: &Model, selection: &SelectionReport, opts: &ReplaceOptions) -> Result<(Model, SurgerySummary)> {
    replace_blocks(model, &selection.chosen, opts)
}

/// Plain depth pruning: the listed blocks are removed outright.
pub fn delete_blocks(model: &Model, pruned: &[usize]) -> Result<Model> {
    Ok(model.remove_blocks(pruned)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtensionPattern {
    /// Every block of the range is repeated in place: `a a b b c c`.
    Block,
    /// The whole range is repeated after itself: `a b c a b c`.
    Sequential,
}

impl FromStr for ExtensionPattern {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "block" => Ok(ExtensionPattern::Block),
            "sequential" => Ok(ExtensionPattern::Sequential),
            other => Err(format!("unknown pattern '{other}' (expected block or sequential)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSpec {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub repeats: usize,
    pub pattern: ExtensionPattern,
    pub gamma_init: f64,
    pub rank: usize,
    pub seed: u64,
}

/// Original block id at every position of the extended sequence.
pub fn extension_layout(n_blocks: usize, spec: &ExtensionSpec) -> Result<Vec<usize>> {
    if spec.start > spec.end || spec.end >= n_blocks {
        return Err(SurgeryError::BadRange {
            start: spec.start,
            end: spec.end,
            n_blocks,
        });
    }
    if spec.repeats == 0 {
        return Err(SurgeryError::Zero("repeats"));
    }
    let range = spec.start..=spec.end;
    let mut layout = Vec::new();
    match spec.pattern {
        ExtensionPattern::Block => {
            for b in 0..n_blocks {
                let copies = if range.contains(&b) { 1 + spec.repeats } else { 1 };
                layout.extend(std::iter::repeat_n(b, copies));
            }
        }
        ExtensionPattern::Sequential => {
            layout.extend(0..=spec.end);
            for _ in 0..spec.repeats {
                layout.extend(range.clone());
            }
            layout.extend(spec.end + 1..n_blocks);
        }
    }
    Ok(layout)
}

/// Inserts `Repeated` copies of the blocks in `spec`'s range. Each copy
/// after the first occurrence shares the original's weights through
/// zero-product adapters and output norms with gain `gamma_init`.
pub fn extend(model: &Model, spec: &ExtensionSpec) -> Result<(Model, SurgerySummary)> {
    check_gamma(spec.gamma_init)?;
    if spec.rank == 0 {
        return Err(SurgeryError::Zero("rank"));
    }
    let layout = extension_layout(model.n_blocks(), spec)?;
    for b in spec.start..=spec.end {
        if model.blocks[b].native().is_none() {
            return Err(SurgeryError::NotNative(b));
        }
    }
    let max_rank = model.config.d_model.min(model.config.d_ff);
    if spec.rank > max_rank {
        return Err(LinalgError::RankOutOfRange {
            rank: spec.rank,
            max: max_rank,
        }
        .into());
    }

    // new position of each original block's first occurrence
    let mut first_pos = vec![usize::MAX; model.n_blocks()];
    for (p, &b) in layout.iter().enumerate() {
        if first_pos[b] == usize::MAX {
            first_pos[b] = p;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(spec.seed, "surgery/extend"));
    let cfg = model.config;
    let mut blocks = Vec::with_capacity(layout.len());
    let mut bases = BTreeMap::new();
    for (p, &b) in layout.iter().enumerate() {
        if p == first_pos[b] {
            let mut kept = model.blocks[b].clone();
            if let Some(s) = kept.shared_mut() {
                s.base_index = first_pos[s.base_index];
            }
            blocks.push(kept);
            continue;
        }
        let adapters: Vec<LoraAdapter> = Role::ALL
            .iter()
            .map(|role| {
                let (r, c) = role.shape(&cfg);
                LoraAdapter::zero_product(r, c, spec.rank, &mut rng)
            })
            .collect();
        bases.insert(p, first_pos[b]);
        blocks.push(BlockKind::Repeated(SharedBlock {
            base_index: first_pos[b],
            adapters: adapters.try_into().expect("six roles"),
            attn_norm: OutputNorm::new(cfg.d_model, spec.gamma_init, cfg.norm_eps),
            mlp_norm: OutputNorm::new(cfg.d_model, spec.gamma_init, cfg.norm_eps),
        }));
    }
    let mut out = model.clone();
    out.config.n_layers = blocks.len();
    out.blocks = blocks;
    out.validate()?;
    let before = model.count_params().total;
    let after = out.count_params().total;
    let summary = SurgerySummary {
        operation: "extend".into(),
        pruned: Vec::new(),
        bases,
        rank: spec.rank,
        gamma_init: spec.gamma_init,
        adapter_init: AdapterInit::ZeroProduct,
        residual_norms: BTreeMap::new(),
        params_before: before,
        params_after: after,
        param_delta: after as i64 - before as i64,
    };
    Ok((out, summary))
}
