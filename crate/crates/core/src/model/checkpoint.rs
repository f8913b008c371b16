//! Checkpoint layout:
//!
//! ```text
//! BLKSHARE1
//! config n_layers=8 d_model=64 n_heads=4 d_ff=256 vocab_size=256 max_seq_len=128 norm_eps=0.00001
//! block 0 native
//! block 5 shared base=4 rank=8 attn_eps=0.00001 mlp_eps=0.00001
//! tensor tok_emb 256 64 0
//! ...
//! data
//! <raw little-endian f64, row-major, in tensor-table order>
//! ```
//!
//! Tensor offsets are byte offsets from the first byte after the `data` line.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::surgery::{LoraAdapter, OutputNorm};

use super::{BlockKind, BlockWeights, Model, ModelConfig, ModelError, Role, SharedBlock};

pub const MAGIC: &str = "BLKSHARE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header at line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("tensor table mismatch for {name}: {message}")]
    TensorTable { name: String, message: String },
    #[error("truncated data section: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("referential integrity: {0}")]
    Integrity(ModelError),
    #[error("invalid model: {0}")]
    Invalid(ModelError),
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<(), CheckpointError> {
    model.validate().map_err(CheckpointError::Invalid)?;
    let c = &model.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "config n_layers={} d_model={} n_heads={} d_ff={} vocab_size={} max_seq_len={} norm_eps={}\n",
        c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len, c.norm_eps
    ));
    for (i, b) in model.blocks.iter().enumerate() {
        match b.shared() {
            None => header.push_str(&format!("block {i} native\n")),
            Some(s) => header.push_str(&format!(
                "block {i} {} base={} rank={} attn_eps={} mlp_eps={}\n",
                b.label(),
                s.base_index,
                s.rank(),
                s.attn_norm.eps,
                s.mlp_norm.eps
            )),
        }
    }
    let tensors = model.tensors();
    let mut offset = 0usize;
    for (info, data) in &tensors {
        header.push_str(&format!("tensor {} {} {} {}\n", info.name, info.shape.0, info.shape.1, offset));
        offset += data.len() * 8;
    }
    header.push_str("data\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset);
    for (_, data) in &tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes)
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str, CheckpointError> {
        self.line_no += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|b| *b == b'\n').ok_or_else(|| CheckpointError::Header {
            line: self.line_no,
            message: "unexpected end of header".into(),
        })?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Header {
            line: self.line_no,
            message: "header is not utf-8".into(),
        })
    }

    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Header {
            line: self.line_no,
            message: message.into(),
        }
    }
}

fn kv<'a>(lines: &Lines<'_>, token: &'a str, key: &str) -> Result<&'a str, CheckpointError> {
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| lines.err(format!("expected {key}=..., found {token:?}")))
}

fn num<T: std::str::FromStr>(lines: &Lines<'_>, s: &str) -> Result<T, CheckpointError> {
    s.parse().map_err(|_| lines.err(format!("bad number {s:?}")))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut lines = Lines {
        bytes,
        pos: 0,
        line_no: 0,
    };
    if lines.next_line()? != MAGIC {
        return Err(lines.err(format!("bad magic, expected {MAGIC}")));
    }

    let line = lines.next_line()?;
    let toks: Vec<&str> = line.split(' ').collect();
    if toks.len() != 8 || toks[0] != "config" {
        return Err(lines.err("expected config line"));
    }
    let config = ModelConfig {
        n_layers: num(&lines, kv(&lines, toks[1], "n_layers")?)?,
        d_model: num(&lines, kv(&lines, toks[2], "d_model")?)?,
        n_heads: num(&lines, kv(&lines, toks[3], "n_heads")?)?,
        d_ff: num(&lines, kv(&lines, toks[4], "d_ff")?)?,
        vocab_size: num(&lines, kv(&lines, toks[5], "vocab_size")?)?,
        max_seq_len: num(&lines, kv(&lines, toks[6], "max_seq_len")?)?,
        norm_eps: num(&lines, kv(&lines, toks[7], "norm_eps")?)?,
    };
    config.validate().map_err(|e| lines.err(e.to_string()))?;

    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let line = lines.next_line()?;
        let toks: Vec<&str> = line.split(' ').collect();
        if toks.len() < 3 || toks[0] != "block" || toks[1] != i.to_string() {
            return Err(lines.err(format!("expected block {i}")));
        }
        let block = match (toks[2], toks.len()) {
            ("native", 3) => BlockKind::Native(BlockWeights::zeros(&config)),
            (kind @ ("shared" | "repeated"), 7) => {
                let base_index: usize = num(&lines, kv(&lines, toks[3], "base")?)?;
                let rank: usize = num(&lines, kv(&lines, toks[4], "rank")?)?;
                let attn_eps: f64 = num(&lines, kv(&lines, toks[5], "attn_eps")?)?;
                let mlp_eps: f64 = num(&lines, kv(&lines, toks[6], "mlp_eps")?)?;
                if rank == 0 {
                    return Err(lines.err("adapter rank must be >= 1"));
                }
                let s = SharedBlock {
                    base_index,
                    adapters: Role::ALL.map(|role| {
                        let (m, n) = role.shape(&config);
                        LoraAdapter {
                            a: Matrix::zeros(m, rank),
                            b: Matrix::zeros(rank, n),
                        }
                    }),
                    attn_norm: OutputNorm::new(config.d_model, 0.0, attn_eps),
                    mlp_norm: OutputNorm::new(config.d_model, 0.0, mlp_eps),
                };
                if kind == "shared" {
                    BlockKind::Shared(s)
                } else {
                    BlockKind::Repeated(s)
                }
            }
            _ => return Err(lines.err(format!("bad block line {line:?}"))),
        };
        blocks.push(block);
    }
    for (i, b) in blocks.iter().enumerate() {
        if let Some(s) = b.shared() {
            if !matches!(blocks.get(s.base_index), Some(BlockKind::Native(_))) {
                return Err(CheckpointError::Integrity(ModelError::BadBaseIndex {
                    block: i,
                    base: s.base_index,
                }));
            }
        }
    }

    let d = config.d_model;
    let mut model = Model {
        config,
        tok_emb: Matrix::zeros(config.vocab_size, d),
        pos_emb: Matrix::zeros(config.max_seq_len, d),
        blocks,
        final_gain: vec![0.0; d],
        unembed: Matrix::zeros(d, config.vocab_size),
    };

    let expected: Vec<_> = model.tensors().into_iter().map(|(i, d)| (i, d.len())).collect();
    let mut offset = 0usize;
    for (info, len) in &expected {
        let line = lines.next_line()?;
        let toks: Vec<&str> = line.split(' ').collect();
        let table_err = |message: String| CheckpointError::TensorTable {
            name: info.name.clone(),
            message,
        };
        if toks.len() != 5 || toks[0] != "tensor" {
            return Err(table_err(format!("bad tensor line {line:?}")));
        }
        if toks[1] != info.name {
            return Err(table_err(format!("found tensor {:?} in its place", toks[1])));
        }
        let rows: usize = num(&lines, toks[2])?;
        let cols: usize = num(&lines, toks[3])?;
        let off: usize = num(&lines, toks[4])?;
        if (rows, cols) != info.shape {
            return Err(table_err(format!("shape {rows}x{cols}, expected {:?}", info.shape)));
        }
        if off != offset {
            return Err(table_err(format!("offset {off}, expected {offset}")));
        }
        offset += len * 8;
    }
    if lines.next_line()? != "data" {
        return Err(lines.err("expected data marker"));
    }
    let data = &bytes[lines.pos..];
    if data.len() < offset {
        return Err(CheckpointError::Truncated {
            expected: offset,
            found: data.len(),
        });
    }
    if data.len() > offset {
        return Err(CheckpointError::TensorTable {
            name: "<data>".into(),
            message: format!("{} trailing bytes", data.len() - offset),
        });
    }
    let mut chunks = data.chunks_exact(8);
    for (_, slot) in model.tensors_mut() {
        for v in slot.iter_mut() {
            let c = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    model.validate().map_err(CheckpointError::Invalid)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 16,
            norm_eps: 1e-5,
        };
        let mut m = Model::init_random(cfg, 4).unwrap();
        let base = m.blocks[0].native().unwrap().clone();
        let other = m.blocks[2].native().unwrap().clone();
        m.blocks[2] = BlockKind::Shared(SharedBlock {
            base_index: 0,
            adapters: Role::ALL.map(|r| LoraAdapter::from_difference(other.role(r), base.role(r), 2).unwrap()),
            attn_norm: OutputNorm::new(8, 1e-4, 1e-5),
            mlp_norm: OutputNorm::new(8, 0.5, 1e-6),
        });
        m
    }

    fn bytes(m: &Model) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(m, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let first = bytes(&m);
        let loaded = read_checkpoint(&first).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(bytes(&loaded), first);
        let toks = [1, 5, 3, 10];
        let a = m.forward(&toks).unwrap();
        let b = loaded.forward(&toks).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bad_magic() {
        let mut b = bytes(&model());
        b[0] = b'X';
        assert!(matches!(read_checkpoint(&b), Err(CheckpointError::Header { line: 1, .. })));
    }

    #[test]
    fn truncated_data() {
        let b = bytes(&model());
        let cut = &b[..b.len() - 8];
        assert!(matches!(read_checkpoint(cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch_in_table() {
        let b = bytes(&model());
        let text = String::from_utf8_lossy(&b).replacen("tensor tok_emb 11 8", "tensor tok_emb 11 9", 1);
        // lossy is fine: we only read as far as the header
        assert!(matches!(
            read_checkpoint(text.as_bytes()),
            Err(CheckpointError::TensorTable { .. })
        ));
    }

    #[test]
    fn dangling_base_is_integrity_error() {
        let b = bytes(&model());
        let text = String::from_utf8_lossy(&b).replacen("base=0", "base=7", 1);
        assert!(matches!(read_checkpoint(text.as_bytes()), Err(CheckpointError::Integrity(_))));
        // base pointing at a shared block is equally dangling
        let text = String::from_utf8_lossy(&b).replacen("base=0", "base=2", 1);
        assert!(matches!(read_checkpoint(text.as_bytes()), Err(CheckpointError::Integrity(_))));
    }
}
