//! Llama-architecture decoder-only transformer: configuration, weights,
//! checkpoint I/O, and a forward pass that consults a skip set.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, generate, ForwardOutput, KvCache};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rope_angle, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of transformer layers (blocks).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value heads for grouped-query attention; divides `n_heads`.
    pub n_kv_heads: usize,
    /// Hidden width of the gated MLP.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta_base: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rope_theta_base > 1.0) {
            return Err(Error::Config(format!(
                "rope_theta_base must exceed 1, got {}",
                self.rope_theta_base
            )));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config(format!(
                "norm_eps must be non-negative, got {}",
                self.norm_eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total width of the key/value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Self-attention weights of one layer. Projection tensors are stored
/// (out_features, in_features) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Pre-attention RMS norm gain.
    pub norm: Tensor,
}

/// Gated-MLP weights of one layer, (out_features, in_features) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
    /// Pre-MLP RMS norm gain.
    pub norm: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub mlp: MlpWeights,
}

/// All learned tensors of a model. Treated as immutable by every operation;
/// shareable across threads.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embedding matrix, (vocab_size, d_model).
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// Output projection, (d_model, vocab_size).
    pub lm_head: Tensor,
    rope: RopeTable,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.layers == other.layers
            && self.final_norm == other.final_norm
            && self.lm_head == other.lm_head
    }
}

/// Precomputed cos/sin per (position, pair), derived from the config.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    fn build(config: &ModelConfig) -> Self {
        let d = config.head_dim();
        let half = d / 2;
        let mut cos = Vec::with_capacity(config.max_seq_len * half);
        let mut sin = Vec::with_capacity(config.max_seq_len * half);
        for pos in 0..config.max_seq_len {
            for pair in 0..half {
                let (s, c) = rope_angle(pos, pair, d, config.rope_theta_base).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        RopeTable { half, cos, sin }
    }

    /// (cos, sin) rows for one position.
    pub(crate) fn at(&self, pos: usize) -> (&[f32], &[f32]) {
        let start = pos * self.half;
        (
            &self.cos[start..start + self.half],
            &self.sin[start..start + self.half],
        )
    }
}

impl ModelWeights {
    /// Assembles a model after checking every tensor shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        lm_head: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let rope = RopeTable::build(&config);
        let w = ModelWeights {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            rope,
        };
        w.check_shapes()?;
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |name: &str, t: &Tensor, dims: &[usize]| -> Result<()> {
            if t.dims() != dims {
                return Err(Error::Structure(format!(
                    "tensor `{name}` has dims {:?}, expected {:?}",
                    t.dims(),
                    dims
                )));
            }
            Ok(())
        };
        if self.layers.len() != c.n_layers {
            return Err(Error::Structure(format!(
                "model has {} layer entries, config declares {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        expect("embed", &self.embed, &[c.vocab_size, c.d_model])?;
        for (i, layer) in self.layers.iter().enumerate() {
            let d = c.d_model;
            let kv = c.kv_dim();
            expect(&format!("layers.{i}.attn.wq"), &layer.attn.wq, &[d, d])?;
            expect(&format!("layers.{i}.attn.wk"), &layer.attn.wk, &[kv, d])?;
            expect(&format!("layers.{i}.attn.wv"), &layer.attn.wv, &[kv, d])?;
            expect(&format!("layers.{i}.attn.wo"), &layer.attn.wo, &[d, d])?;
            expect(&format!("layers.{i}.attn.norm"), &layer.attn.norm, &[d])?;
            expect(
                &format!("layers.{i}.mlp.gate"),
                &layer.mlp.gate,
                &[c.d_ff, d],
            )?;
            expect(&format!("layers.{i}.mlp.up"), &layer.mlp.up, &[c.d_ff, d])?;
            expect(
                &format!("layers.{i}.mlp.down"),
                &layer.mlp.down,
                &[d, c.d_ff],
            )?;
            expect(&format!("layers.{i}.mlp.norm"), &layer.mlp.norm, &[d])?;
        }
        expect("final_norm", &self.final_norm, &[c.d_model])?;
        expect("lm_head", &self.lm_head, &[c.d_model, c.vocab_size])?;
        Ok(())
    }

    pub(crate) fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// Total number of parameters.
    pub fn n_params(&self) -> usize {
        let per_layer: usize = self
            .layers
            .first()
            .map(|l| {
                l.attn.wq.len()
                    + l.attn.wk.len()
                    + l.attn.wv.len()
                    + l.attn.wo.len()
                    + l.attn.norm.len()
                    + l.mlp.gate.len()
                    + l.mlp.up.len()
                    + l.mlp.down.len()
                    + l.mlp.norm.len()
            })
            .unwrap_or(0);
        self.embed.len()
            + per_layer * self.layers.len()
            + self.final_norm.len()
            + self.lm_head.len()
    }

    /// Tensors in canonical checkpoint order, with their canonical names.
    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.wq"), &layer.attn.wq));
            out.push((format!("layers.{i}.attn.wk"), &layer.attn.wk));
            out.push((format!("layers.{i}.attn.wv"), &layer.attn.wv));
            out.push((format!("layers.{i}.attn.wo"), &layer.attn.wo));
            out.push((format!("layers.{i}.attn.norm"), &layer.attn.norm));
            out.push((format!("layers.{i}.mlp.gate"), &layer.mlp.gate));
            out.push((format!("layers.{i}.mlp.up"), &layer.mlp.up));
            out.push((format!("layers.{i}.mlp.down"), &layer.mlp.down));
            out.push((format!("layers.{i}.mlp.norm"), &layer.mlp.norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }
}

/// Synthesizes a model with every weight drawn uniformly from
/// `[−1/√d_model, 1/√d_model)` using a ChaCha8 generator, so the same
/// (config, seed) pair always yields bit-identical tensors. Tensors are
/// filled in canonical checkpoint order.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let mut fill = |dims: &[usize]| -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * scale)
            .collect();
        Tensor::from_vec(dims, data).expect("length matches dims by construction")
    };
    let d = config.d_model;
    let kv = config.kv_dim();
    let embed = fill(&[config.vocab_size, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn: AttentionWeights {
                wq: fill(&[d, d]),
                wk: fill(&[kv, d]),
                wv: fill(&[kv, d]),
                wo: fill(&[d, d]),
                norm: fill(&[d]),
            },
            mlp: MlpWeights {
                gate: fill(&[config.d_ff, d]),
                up: fill(&[config.d_ff, d]),
                down: fill(&[d, config.d_ff]),
                norm: fill(&[d]),
            },
        })
        .collect();
    let final_norm = fill(&[d]);
    let lm_head = fill(&[d, config.vocab_size]);
    ModelWeights::from_parts(config.clone(), embed, layers, final_norm, lm_head)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    /// Small config for fast tests.
    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 40,
            vocab_size: 31,
            max_seq_len: 24,
            rope_theta_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// FNV-1a over the raw bits of every tensor, in canonical order.
    pub fn weight_fingerprint(w: &ModelWeights) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in w.named_tensors() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = init_random(&cfg, 42).unwrap();
        let b = init_random(&cfg, 42).unwrap();
        assert_eq!(weight_fingerprint(&a), weight_fingerprint(&b));
        let c = init_random(&cfg, 43).unwrap();
        assert_ne!(weight_fingerprint(&a), weight_fingerprint(&c));
    }

    #[test]
    fn invalid_head_grouping_is_config_error() {
        let cfg = ModelConfig {
            n_heads: 3,
            n_kv_heads: 2,
            ..tiny_config()
        };
        assert!(matches!(init_random(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn odd_head_dim_is_config_error() {
        let cfg = ModelConfig {
            d_model: 12,
            n_heads: 4,
            n_kv_heads: 2,
            ..tiny_config()
        };
        // head dim 3 is odd.
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_values_within_documented_scale() {
        let cfg = tiny_config();
        let w = init_random(&cfg, 7).unwrap();
        let bound = 1.0 / (cfg.d_model as f32).sqrt() + 1e-7;
        for (_, t) in w.named_tensors() {
            assert!(t.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn n_params_counts_everything() {
        let cfg = tiny_config();
        let w = init_random(&cfg, 0).unwrap();
        let total: usize = w.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(w.n_params(), total);
    }
}
