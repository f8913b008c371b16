//! A small pre-norm decoder-only transformer whose block list may mix
//! native blocks with blocks that borrow another block's weights.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::surgery::{LoraAdapter, OutputNorm};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, MAGIC};
pub use forward::{ForwardOptions, HiddenTrace};
pub(crate) use forward::{gelu_grad, output_norm_backward, rms_backward, BlockCache, BlockView};

/// Standard deviation of freshly initialised weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequences in a batch must share one length (got {0} and {1})")]
    RaggedBatch(usize, usize),
    #[error("block {block} uses base {base}, which is not a native block of this model")]
    BadBaseIndex { block: usize, base: usize },
    #[error("block {block} tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    BadShape {
        block: usize,
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("block {0} out of range")]
    NoSuchBlock(usize),
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of block positions in the sequence (native + shared + repeated).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(ModelError::InvalidConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters held by one native block: six projections and two gains.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + 2 * d
    }

    /// The desk-scale model used by the end-to-end experiments.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            max_seq_len: 128,
            norm_eps: 1e-5,
        }
    }
}

/// Projection roles inside a block, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::Up, Role::Down];

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Up => "up",
            Role::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            Role::Up => (d, cfg.d_ff),
            Role::Down => (cfg.d_ff, d),
            _ => (d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_gain: Vec<f64>,
    pub mlp_gain: Vec<f64>,
}

impl BlockWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let m = |r: Role| {
            let (a, b) = r.shape(cfg);
            Matrix::zeros(a, b)
        };
        BlockWeights {
            w_q: m(Role::Q),
            w_k: m(Role::K),
            w_v: m(Role::V),
            w_o: m(Role::O),
            w_up: m(Role::Up),
            w_down: m(Role::Down),
            attn_gain: vec![0.0; cfg.d_model],
            mlp_gain: vec![0.0; cfg.d_model],
        }
    }

    pub fn role(&self, role: Role) -> &Matrix {
        match role {
            Role::Q => &self.w_q,
            Role::K => &self.w_k,
            Role::V => &self.w_v,
            Role::O => &self.w_o,
            Role::Up => &self.w_up,
            Role::Down => &self.w_down,
        }
    }

    pub fn role_mut(&mut self, role: Role) -> &mut Matrix {
        match role {
            Role::Q => &mut self.w_q,
            Role::K => &mut self.w_k,
            Role::V => &mut self.w_v,
            Role::O => &mut self.w_o,
            Role::Up => &mut self.w_up,
            Role::Down => &mut self.w_down,
        }
    }

    pub fn param_count(&self) -> usize {
        Role::ALL
            .iter()
            .map(|r| {
                let m = self.role(*r);
                m.rows() * m.cols()
            })
            .sum::<usize>()
            + self.attn_gain.len()
            + self.mlp_gain.len()
    }
}

/// A block that reuses the projections (and pre-norm gains) of a native
/// base block, corrected by one adapter per role and followed by output
/// normalisation on both sublayers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBlock {
    pub base_index: usize,
    pub adapters: [LoraAdapter; 6],
    pub attn_norm: OutputNorm,
    pub mlp_norm: OutputNorm,
}

impl SharedBlock {
    pub fn adapter(&self, role: Role) -> &LoraAdapter {
        &self.adapters[role.index()]
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    pub fn param_count(&self) -> (usize, usize) {
        let adapters = self.adapters.iter().map(LoraAdapter::param_count).sum();
        let gammas = self.attn_norm.gamma.len() + self.mlp_norm.gamma.len();
        (adapters, gammas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockKind {
    Native(BlockWeights),
    /// Replacement for a pruned block.
    Shared(SharedBlock),
    /// Extra copy inserted by model extension.
    Repeated(SharedBlock),
}

impl BlockKind {
    pub fn label(&self) -> &'static str {
        match self {
            BlockKind::Native(_) => "native",
            BlockKind::Shared(_) => "shared",
            BlockKind::Repeated(_) => "repeated",
        }
    }

    pub fn shared(&self) -> Option<&SharedBlock> {
        match self {
            BlockKind::Native(_) => None,
            BlockKind::Shared(s) | BlockKind::Repeated(s) => Some(s),
        }
    }

    pub fn shared_mut(&mut self) -> Option<&mut SharedBlock> {
        match self {
            BlockKind::Native(_) => None,
            BlockKind::Shared(s) | BlockKind::Repeated(s) => Some(s),
        }
    }

    pub fn native(&self) -> Option<&BlockWeights> {
        match self {
            BlockKind::Native(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockKind>,
    pub final_gain: Vec<f64>,
    pub unembed: Matrix,
}

/// What a parameter tensor is, for optimizer masks and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    TokenEmbedding,
    PositionEmbedding,
    Projection(Role),
    NormGain,
    FinalGain,
    Unembedding,
    AdapterA(Role),
    AdapterB(Role),
    OutputGamma,
}

/// Identity of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub class: ParamClass,
    /// Block position the tensor belongs to, if any.
    pub block: Option<usize>,
    pub shape: (usize, usize),
}

impl Model {
    /// Deterministic init: N(0, 0.02) for every matrix, unit gains.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let d = config.d_model;
        let tok_emb = draw(config.vocab_size, d);
        let pos_emb = draw(config.max_seq_len, d);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut mats = Role::ALL.iter().map(|r| {
                let (a, b) = r.shape(&config);
                draw(a, b)
            });
            let mut next = || mats.next().expect("six roles");
            blocks.push(BlockKind::Native(BlockWeights {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                w_up: next(),
                w_down: next(),
                attn_gain: vec![1.0; d],
                mlp_gain: vec![1.0; d],
            }));
        }
        let unembed = draw(d, config.vocab_size);
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_gain: vec![1.0; d],
            unembed,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Weights a block computes with: its own, or its base's.
    pub fn base_weights(&self, position: usize) -> Result<&BlockWeights> {
        match self.blocks.get(position) {
            None => Err(ModelError::NoSuchBlock(position)),
            Some(BlockKind::Native(w)) => Ok(w),
            Some(BlockKind::Shared(s)) | Some(BlockKind::Repeated(s)) => {
                match self.blocks.get(s.base_index) {
                    Some(BlockKind::Native(w)) => Ok(w),
                    _ => Err(ModelError::BadBaseIndex {
                        block: position,
                        base: s.base_index,
                    }),
                }
            }
        }
    }

    /// Effective projection of a block for one role: `W_base + a·b` for
    /// shared/repeated blocks.
    pub fn effective_weight(&self, position: usize, role: Role) -> Result<Matrix> {
        let base = self.base_weights(position)?.role(role);
        match self.blocks[position].shared() {
            None => Ok(base.clone()),
            Some(s) => Ok(base.add(&s.adapter(role).delta())?),
        }
    }

    /// Positions whose weights are borrowed by at least one other block.
    pub fn shared_bases(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .blocks
            .iter()
            .filter_map(|b| b.shared().map(|s| s.base_index))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Checks config, shapes, finiteness and base references.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.n_layers != self.blocks.len() {
            return Err(ModelError::InvalidConfig(format!(
                "config says {} layers but model holds {} blocks",
                cfg.n_layers,
                self.blocks.len()
            )));
        }
        let expected = self.expected_shapes();
        let actual = self.tensors();
        for ((info, data), exp) in actual.iter().zip(&expected) {
            if info.shape != exp.shape || data.len() != exp.shape.0 * exp.shape.1 {
                return Err(ModelError::BadShape {
                    block: info.block.unwrap_or(usize::MAX),
                    tensor: info.name.clone(),
                    expected: exp.shape,
                    found: info.shape,
                });
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(info.name.clone()));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(s) = b.shared() {
                if !matches!(self.blocks.get(s.base_index), Some(BlockKind::Native(_))) {
                    return Err(ModelError::BadBaseIndex {
                        block: i,
                        base: s.base_index,
                    });
                }
                let r = s.rank();
                if r == 0 || s.adapters.iter().any(|a| a.rank() != r) {
                    return Err(ModelError::InvalidConfig(format!(
                        "block {i}: adapters must share one rank >= 1"
                    )));
                }
                if !(s.attn_norm.eps > 0.0 && s.mlp_norm.eps > 0.0) {
                    return Err(ModelError::InvalidConfig(format!(
                        "block {i}: output norm eps must be > 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every stored tensor in canonical order, with its data.
    pub fn tensors(&self) -> Vec<(TensorInfo, &[f64])> {
        let mut out = Vec::new();
        visit_tensors(self, &mut |info, data: &[f64]| out.push((info, data)));
        out
    }

    /// Mutable counterpart of [`Model::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorInfo, &mut [f64])> {
        let mut out = Vec::new();
        visit_tensors_mut(self, &mut |info, data| out.push((info, data)));
        out
    }

    fn expected_shapes(&self) -> Vec<TensorInfo> {
        // A fresh zero model with the same block structure.
        self.zeros_like()
            .tensors()
            .into_iter()
            .map(|(info, _)| info)
            .collect()
    }

    /// Same structure, every tensor zero. Used for gradients and optimizer
    /// moments.
    pub fn zeros_like(&self) -> Model {
        let cfg = self.config;
        let d = cfg.d_model;
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                BlockKind::Native(_) => BlockKind::Native(BlockWeights::zeros(&cfg)),
                BlockKind::Shared(s) => BlockKind::Shared(zero_shared(s, &cfg)),
                BlockKind::Repeated(s) => BlockKind::Repeated(zero_shared(s, &cfg)),
            })
            .collect();
        Model {
            config: cfg,
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            blocks,
            final_gain: vec![0.0; d],
            unembed: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// Deletes block positions outright, renumbering the base references of
    /// the survivors. Fails if a deleted block is still used as a base.
    pub fn remove_blocks(&self, positions: &[usize]) -> Result<Model> {
        for &p in positions {
            if p >= self.blocks.len() {
                return Err(ModelError::NoSuchBlock(p));
            }
        }
        let removed = |i: usize| positions.contains(&i);
        let mut new_index = vec![usize::MAX; self.blocks.len()];
        let mut next = 0;
        for (i, slot) in new_index.iter_mut().enumerate() {
            if !removed(i) {
                *slot = next;
                next += 1;
            }
        }
        let mut blocks = Vec::with_capacity(next);
        for (i, b) in self.blocks.iter().enumerate() {
            if removed(i) {
                continue;
            }
            let mut b = b.clone();
            if let Some(s) = b.shared_mut() {
                if removed(s.base_index) || s.base_index >= new_index.len() {
                    return Err(ModelError::BadBaseIndex {
                        block: i,
                        base: s.base_index,
                    });
                }
                s.base_index = new_index[s.base_index];
            }
            blocks.push(b);
        }
        let mut model = self.clone();
        model.config.n_layers = blocks.len();
        model.blocks = blocks;
        Ok(model)
    }

    pub fn count_params(&self) -> ParamCount {
        let mut by_kind = BTreeMap::new();
        let cfg = &self.config;
        let emb = self.tok_emb.as_slice().len() + self.pos_emb.as_slice().len();
        by_kind.insert("embedding".to_string(), emb);
        by_kind.insert("unembedding".to_string(), self.unembed.as_slice().len());
        by_kind.insert("final_norm".to_string(), self.final_gain.len());
        let mut native = 0;
        let mut adapters = 0;
        let mut gammas = 0;
        for b in &self.blocks {
            match b {
                BlockKind::Native(w) => native += w.param_count(),
                BlockKind::Shared(s) | BlockKind::Repeated(s) => {
                    let (a, g) = s.param_count();
                    adapters += a;
                    gammas += g;
                }
            }
        }
        debug_assert_eq!(
            native,
            cfg.block_params()
                * self
                    .blocks
                    .iter()
                    .filter(|b| matches!(b, BlockKind::Native(_)))
                    .count()
        );
        by_kind.insert("native_blocks".to_string(), native);
        by_kind.insert("adapters".to_string(), adapters);
        by_kind.insert("output_gammas".to_string(), gammas);
        ParamCount {
            total: by_kind.values().sum(),
            by_kind,
        }
    }
}

fn zero_shared(s: &SharedBlock, cfg: &ModelConfig) -> SharedBlock {
    let r = s.rank();
    let adapters = Role::ALL.map(|role| {
        let (m, n) = role.shape(cfg);
        LoraAdapter {
            a: Matrix::zeros(m, r),
            b: Matrix::zeros(r, n),
        }
    });
    SharedBlock {
        base_index: s.base_index,
        adapters,
        attn_norm: OutputNorm {
            gamma: vec![0.0; cfg.d_model],
            eps: s.attn_norm.eps,
        },
        mlp_norm: OutputNorm {
            gamma: vec![0.0; cfg.d_model],
            eps: s.mlp_norm.eps,
        },
    }
}

fn info(name: String, class: ParamClass, block: Option<usize>, shape: (usize, usize)) -> TensorInfo {
    TensorInfo {
        name,
        class,
        block,
        shape,
    }
}

// The two visitors below must enumerate in the same order; the checkpoint
// tensor table and the optimizer both depend on it.
fn visit_tensors<'a>(m: &'a Model, f: &mut impl FnMut(TensorInfo, &'a [f64])) {
    let mat = |name: &str, class, block, x: &'a Matrix| (info(name.to_string(), class, block, x.shape()), x.as_slice());
    let (i, d) = mat("tok_emb", ParamClass::TokenEmbedding, None, &m.tok_emb);
    f(i, d);
    let (i, d) = mat("pos_emb", ParamClass::PositionEmbedding, None, &m.pos_emb);
    f(i, d);
    for (p, b) in m.blocks.iter().enumerate() {
        let pre = format!("blocks.{p}");
        match b {
            BlockKind::Native(w) => {
                for role in Role::ALL {
                    let x = w.role(role);
                    f(
                        info(format!("{pre}.w_{}", role.name()), ParamClass::Projection(role), Some(p), x.shape()),
                        x.as_slice(),
                    );
                }
                f(info(format!("{pre}.attn_gain"), ParamClass::NormGain, Some(p), (1, w.attn_gain.len())), &w.attn_gain);
                f(info(format!("{pre}.mlp_gain"), ParamClass::NormGain, Some(p), (1, w.mlp_gain.len())), &w.mlp_gain);
            }
            BlockKind::Shared(s) | BlockKind::Repeated(s) => {
                for role in Role::ALL {
                    let a = &s.adapters[role.index()];
                    f(
                        info(format!("{pre}.adapter_{}.a", role.name()), ParamClass::AdapterA(role), Some(p), a.a.shape()),
                        a.a.as_slice(),
                    );
                    f(
                        info(format!("{pre}.adapter_{}.b", role.name()), ParamClass::AdapterB(role), Some(p), a.b.shape()),
                        a.b.as_slice(),
                    );
                }
                let g = &s.attn_norm.gamma;
                f(info(format!("{pre}.attn_out_gamma"), ParamClass::OutputGamma, Some(p), (1, g.len())), g);
                let g = &s.mlp_norm.gamma;
                f(info(format!("{pre}.mlp_out_gamma"), ParamClass::OutputGamma, Some(p), (1, g.len())), g);
            }
        }
    }
    f(info("final_gain".into(), ParamClass::FinalGain, None, (1, m.final_gain.len())), &m.final_gain);
    let (i, d) = mat("unembed", ParamClass::Unembedding, None, &m.unembed);
    f(i, d);
}

fn visit_tensors_mut<'a>(m: &'a mut Model, f: &mut impl FnMut(TensorInfo, &'a mut [f64])) {
    fn mat(name: String, class: ParamClass, block: Option<usize>, x: &mut Matrix) -> (TensorInfo, &mut [f64]) {
        let shape = x.shape();
        (info(name, class, block, shape), x.as_mut_slice())
    }
    let (i, d) = mat("tok_emb".into(), ParamClass::TokenEmbedding, None, &mut m.tok_emb);
    f(i, d);
    let (i, d) = mat("pos_emb".into(), ParamClass::PositionEmbedding, None, &mut m.pos_emb);
    f(i, d);
    for (p, b) in m.blocks.iter_mut().enumerate() {
        let pre = format!("blocks.{p}");
        match b {
            BlockKind::Native(w) => {
                let BlockWeights {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    w_up,
                    w_down,
                    attn_gain,
                    mlp_gain,
                } = w;
                for (role, x) in Role::ALL.into_iter().zip([w_q, w_k, w_v, w_o, w_up, w_down]) {
                    let (i, d) = mat(format!("{pre}.w_{}", role.name()), ParamClass::Projection(role), Some(p), x);
                    f(i, d);
                }
                let n = attn_gain.len();
                f(info(format!("{pre}.attn_gain"), ParamClass::NormGain, Some(p), (1, n)), attn_gain);
                let n = mlp_gain.len();
                f(info(format!("{pre}.mlp_gain"), ParamClass::NormGain, Some(p), (1, n)), mlp_gain);
            }
            BlockKind::Shared(s) | BlockKind::Repeated(s) => {
                for (role, a) in Role::ALL.into_iter().zip(s.adapters.iter_mut()) {
                    let (i, d) = mat(format!("{pre}.adapter_{}.a", role.name()), ParamClass::AdapterA(role), Some(p), &mut a.a);
                    f(i, d);
                    let (i, d) = mat(format!("{pre}.adapter_{}.b", role.name()), ParamClass::AdapterB(role), Some(p), &mut a.b);
                    f(i, d);
                }
                let n = s.attn_norm.gamma.len();
                f(info(format!("{pre}.attn_out_gamma"), ParamClass::OutputGamma, Some(p), (1, n)), &mut s.attn_norm.gamma);
                let n = s.mlp_norm.gamma.len();
                f(info(format!("{pre}.mlp_out_gamma"), ParamClass::OutputGamma, Some(p), (1, n)), &mut s.mlp_norm.gamma);
            }
        }
    }
    let n = m.final_gain.len();
    f(info("final_gain".into(), ParamClass::FinalGain, None, (1, n)), &mut m.final_gain);
    let (i, d) = mat("unembed".into(), ParamClass::Unembedding, None, &mut m.unembed);
    f(i, d);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_kind: BTreeMap<String, usize>,
}

impl ParamCount {
    /// `1 - total / reference.total`.
    pub fn compression_ratio(&self, reference: &ParamCount) -> f64 {
        1.0 - self.total as f64 / reference.total as f64
    }

    pub fn get(&self, kind: &str) -> usize {
        self.by_kind.get(kind).copied().unwrap_or(0)
    }
}
