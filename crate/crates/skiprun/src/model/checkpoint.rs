//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic  b"SKPT"
//! u32    format version (currently 1)
//! u32    config length, then that many bytes of UTF-8 JSON (ModelConfig)
//! u32    tensor count
//! per tensor:
//!   u32      name length, then UTF-8 name
//!   u32      ndims, then ndims × u64 dims
//!   u8       dtype tag (0 = f32)
//!   payload  product(dims) × 4 bytes, row-major f32
//! ```
//!
//! Canonical tensor names: `embed`, `layers.<i>.attn.{wq,wk,wv,wo,norm}`,
//! `layers.<i>.mlp.{gate,up,down,norm}`, `final_norm`, `lm_head`, with `i`
//! zero-based. Projection tensors are (out_features, in_features) except
//! `embed` (vocab_size, d_model) and `lm_head` (d_model, vocab_size).
//! Rotary embeddings use interleaved consecutive pairs (2i, 2i+1), not the
//! half-split layout; checkpoints from half-split implementations must be
//! re-interleaved before use.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AttentionWeights, LayerWeights, MlpWeights, ModelConfig, ModelWeights};

const MAGIC: &[u8; 4] = b"SKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Writes `weights` to `path`. `load_checkpoint` reproduces the tensors
/// bit-exactly.
pub fn save_checkpoint(
    weights: &ModelWeights,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    if *config != weights.config {
        return Err(Error::Config(
            "checkpoint config does not match the weights' config".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(config)?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;

    let tensors = weights.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.dims().len() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = std::fs::read(path)?;
    load_from_bytes(&bytes)
}

pub(crate) fn load_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = Cursor { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config JSON")?)
        .map_err(|e| Error::Structure(format!("config JSON: {e}")))?;
    config.validate()?;

    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Structure("tensor name is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32("ndims")? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64("dim")? as usize);
        }
        let dtype = r.u8("dtype tag")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Structure(format!(
                "tensor `{name}` has unsupported dtype tag {dtype}"
            )));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Structure(format!("tensor `{name}` dims overflow")))?;
        let byte_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Structure(format!("tensor `{name}` dims overflow")))?;
        let payload = r.take(byte_len, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors
            .insert(name.clone(), Tensor::from_vec(&dims, data)?)
            .is_some()
        {
            return Err(Error::Structure(format!("duplicate tensor `{name}`")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Structure(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.at
        )));
    }

    let mut take = |name: String| -> Result<Tensor> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Structure(format!("missing tensor `{name}`")))
    };
    let embed = take("embed".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            attn: AttentionWeights {
                wq: take(format!("layers.{i}.attn.wq"))?,
                wk: take(format!("layers.{i}.attn.wk"))?,
                wv: take(format!("layers.{i}.attn.wv"))?,
                wo: take(format!("layers.{i}.attn.wo"))?,
                norm: take(format!("layers.{i}.attn.norm"))?,
            },
            mlp: MlpWeights {
                gate: take(format!("layers.{i}.mlp.gate"))?,
                up: take(format!("layers.{i}.mlp.up"))?,
                down: take(format!("layers.{i}.mlp.down"))?,
                norm: take(format!("layers.{i}.mlp.norm"))?,
            },
        });
    }
    let final_norm = take("final_norm".into())?;
    let lm_head = take("lm_head".into())?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Structure(format!("unexpected tensor `{name}`")));
    }
    let weights = ModelWeights::from_parts(config.clone(), embed, layers, final_norm, lm_head)?;
    Ok((config, weights))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "file ends inside {what} (need {n} bytes at offset {})",
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
