//! Depth pruning with weight-shared replacement blocks for small
//! decoder-only transformers.
//!
//! The pipeline is: score blocks by how little they change the residual
//! stream ([`scoring`]), pick an unpruned base for every pruned block by a
//! low-rank SVD distance ([`selection`]), swap each pruned block for the
//! base plus SVD-initialised low-rank adapters and a near-zero output
//! normalisation ([`surgery`]), then fine-tune ([`training`]). The same
//! machinery extends a model by repeating blocks, and the cheap submodel
//! with shared blocks skipped drives lossless self-speculative decoding
//! ([`inference`]).

pub mod inference;
pub mod linalg;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod scoring;
pub mod selection;
pub mod surgery;
pub mod training;

pub use linalg::{LinalgError, LowRankApprox, Matrix, SvdFactors};
pub use model::{BlockKind, BlockWeights, Model, ModelConfig, ModelError};
pub use surgery::{LoraAdapter, OutputNorm};

/// Stable per-stage seed derived from a root seed and a fixed label.
pub fn stage_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the root through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
