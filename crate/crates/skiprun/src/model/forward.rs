//! Forward pass and greedy decoding.
//!
//! The architecture is pre-norm residual: for each layer the stream receives
//! `x += Attn(norm(x))` then `x += Mlp(norm(x))`. A skipped sublayer omits its
//! entire residual branch, pre-norm included; the stream passes through
//! untouched and none of the branch's tensors are read.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::skip::{LayerFlags, SkipSet};
use crate::tensor::{
    axpy, dot, matmul, matmul_nt, rms_norm_into, rope_rotate_in_place, silu_scalar,
    softmax_in_place, Tensor,
};

use super::{AttentionWeights, MlpWeights, ModelConfig, ModelWeights, RopeTable};

/// Cached key/value rows for one autoregressive decode session.
///
/// Layers whose attention sublayer is skipped hold no storage at all; the
/// saving is observable through [`KvCache::allocated_bytes`].
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<Option<LayerKv>>,
    kv_dim: usize,
    max_seq_len: usize,
    pos: usize,
}

#[derive(Debug, Clone)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl KvCache {
    /// Allocates a cache sized for `config`, with no storage for layers whose
    /// attention is skipped by `skip`.
    pub fn new(config: &ModelConfig, skip: &SkipSet) -> Result<Self> {
        config.validate()?;
        let flags = skip.layer_flags(config.n_layers)?;
        let kv_dim = config.kv_dim();
        let layers = flags
            .iter()
            .map(|f| {
                if f.skip_attention {
                    None
                } else {
                    Some(LayerKv {
                        k: vec![0.0; config.max_seq_len * kv_dim],
                        v: vec![0.0; config.max_seq_len * kv_dim],
                    })
                }
            })
            .collect();
        Ok(KvCache {
            layers,
            kv_dim,
            max_seq_len: config.max_seq_len,
            pos: 0,
        })
    }

    /// Tokens already cached (the next token decodes at this position).
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Number of layers holding key/value storage.
    pub fn cached_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_some()).count()
    }

    /// Bytes of key/value storage held by this cache.
    pub fn allocated_bytes(&self) -> usize {
        self.cached_layers() * 2 * self.max_seq_len * self.kv_dim * std::mem::size_of::<f32>()
    }

    /// Rewinds to position 0 without releasing storage.
    pub fn reset(&mut self) {
        self.pos = 0;
    }

    fn compatible_with(&self, config: &ModelConfig, flags: &[LayerFlags]) -> Result<()> {
        if self.layers.len() != config.n_layers
            || self.kv_dim != config.kv_dim()
            || self.max_seq_len != config.max_seq_len
        {
            return Err(Error::Input(
                "kv cache was allocated for a different model config".into(),
            ));
        }
        for (i, (entry, f)) in self.layers.iter().zip(flags).enumerate() {
            if entry.is_some() == f.skip_attention {
                return Err(Error::Input(format!(
                    "kv cache layout does not match the skip set at layer {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Result of a forward call.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of vocabulary logits per input token.
    pub logits: Tensor,
    /// With capture on: the embedding output plus the residual stream after
    /// every block — exactly `n_layers + 1` tensors of shape (seq, d_model),
    /// recorded regardless of the skip set.
    pub hidden_states: Option<Vec<Tensor>>,
}

/// Runs `tokens` through the model, omitting every sublayer named by `skip`,
/// appending to `cache`, and returning logits for each position.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    skip: &SkipSet,
    cache: &mut KvCache,
    capture: bool,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let flags = skip.layer_flags(cfg.n_layers)?;
    cache.compatible_with(cfg, &flags)?;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    let seq = tokens.len();
    let base_pos = cache.pos;
    if base_pos + seq > cfg.max_seq_len {
        return Err(Error::CacheOverflow {
            pos: base_pos,
            requested: seq,
            max_seq_len: cfg.max_seq_len,
        });
    }

    let d = cfg.d_model;
    let mut x = vec![0.0f32; seq * d];
    for (s, &tok) in tokens.iter().enumerate() {
        x[s * d..(s + 1) * d].copy_from_slice(weights.embed.row(tok as usize));
    }

    let mut states = capture.then(Vec::new);
    let record = |x: &[f32], states: &mut Option<Vec<Tensor>>| {
        if let Some(st) = states {
            st.push(Tensor::from_vec(&[seq, d], x.to_vec()).expect("seq*d values"));
        }
    };
    record(&x, &mut states);

    for (layer, f) in flags.iter().enumerate() {
        let lw = &weights.layers[layer];
        if !f.skip_attention {
            let kv = cache.layers[layer]
                .as_mut()
                .expect("checked by compatible_with");
            let out = attention_block(cfg, &lw.attn, &x, seq, base_pos, kv, weights.rope())?;
            add_in_place(&mut x, out.data());
        }
        if !f.skip_mlp {
            let out = mlp_block(cfg, &lw.mlp, &x, seq)?;
            add_in_place(&mut x, out.data());
        }
        record(&x, &mut states);
    }
    cache.pos += seq;

    let normed = rms_rows(&x, seq, d, weights.final_norm.data(), cfg.norm_eps);
    let logits = matmul(&normed, &weights.lm_head)?;
    Ok(ForwardOutput {
        logits,
        hidden_states: states,
    })
}

fn add_in_place(x: &mut [f32], delta: &[f32]) {
    for (xi, di) in x.iter_mut().zip(delta) {
        *xi += di;
    }
}

/// RMS-normalizes each row of a (seq, d) buffer.
fn rms_rows(x: &[f32], seq: usize, d: usize, weight: &[f32], eps: f32) -> Tensor {
    let mut out = vec![0.0f32; seq * d];
    for s in 0..seq {
        rms_norm_into(
            &x[s * d..(s + 1) * d],
            weight,
            eps,
            &mut out[s * d..(s + 1) * d],
        );
    }
    Tensor::from_vec(&[seq, d], out).expect("seq*d values")
}

fn attention_block(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    x: &[f32],
    seq: usize,
    base_pos: usize,
    kv: &mut LayerKv,
    rope: &RopeTable,
) -> Result<Tensor> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let kv_dim = cfg.kv_dim();
    let group = cfg.group_size();
    let scale = 1.0 / (hd as f32).sqrt();

    let normed = rms_rows(x, seq, d, w.norm.data(), cfg.norm_eps);
    let mut q = matmul_nt(&normed, &w.wq)?;
    let mut k = matmul_nt(&normed, &w.wk)?;
    let v = matmul_nt(&normed, &w.wv)?;

    for s in 0..seq {
        let (cos, sin) = rope.at(base_pos + s);
        let qrow = &mut q.data_mut()[s * d..(s + 1) * d];
        for h in 0..cfg.n_heads {
            rope_rotate_in_place(&mut qrow[h * hd..(h + 1) * hd], cos, sin);
        }
        let krow = &mut k.data_mut()[s * kv_dim..(s + 1) * kv_dim];
        for h in 0..cfg.n_kv_heads {
            rope_rotate_in_place(&mut krow[h * hd..(h + 1) * hd], cos, sin);
        }
    }

    // Write the new rows before attending; causality is enforced by the
    // per-position key count, not by what the cache holds.
    for s in 0..seq {
        let at = (base_pos + s) * kv_dim;
        kv.k[at..at + kv_dim].copy_from_slice(&k.data()[s * kv_dim..(s + 1) * kv_dim]);
        kv.v[at..at + kv_dim].copy_from_slice(&v.data()[s * kv_dim..(s + 1) * kv_dim]);
    }

    let k_cache = &kv.k;
    let v_cache = &kv.v;
    let q_data = q.data();
    let mut ctx = vec![0.0f32; seq * d];
    let row = |(s, crow): (usize, &mut [f32])| {
        let n_keys = base_pos + s + 1;
        let mut scores = vec![0.0f32; n_keys];
        for h in 0..cfg.n_heads {
            let qh = &q_data[s * d + h * hd..s * d + (h + 1) * hd];
            let kvh = h / group;
            for (t, sc) in scores.iter_mut().enumerate() {
                let kt = &k_cache[t * kv_dim + kvh * hd..t * kv_dim + (kvh + 1) * hd];
                *sc = dot(qh, kt) * scale;
            }
            softmax_in_place(&mut scores);
            let out = &mut crow[h * hd..(h + 1) * hd];
            for (t, &sc) in scores.iter().enumerate() {
                let vt = &v_cache[t * kv_dim + kvh * hd..t * kv_dim + (kvh + 1) * hd];
                axpy(sc, vt, out);
            }
        }
    };
    if seq > 1 && (base_pos + seq) * d >= 1 << 13 {
        ctx.par_chunks_mut(d).enumerate().for_each(row);
    } else {
        ctx.chunks_mut(d).enumerate().for_each(row);
    }

    matmul_nt(&Tensor::from_vec(&[seq, d], ctx)?, &w.wo)
}

fn mlp_block(cfg: &ModelConfig, w: &MlpWeights, x: &[f32], seq: usize) -> Result<Tensor> {
    let d = cfg.d_model;
    let normed = rms_rows(x, seq, d, w.norm.data(), cfg.norm_eps);
    let mut gate = matmul_nt(&normed, &w.gate)?;
    let up = matmul_nt(&normed, &w.up)?;
    for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = silu_scalar(*g) * u;
    }
    matmul_nt(&gate, &w.down)
}

/// Greedy argmax; ties break toward the lowest token id.
pub(crate) fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Prefills `prompt` into `cache`, then decodes `n_new` tokens greedily.
/// Returns only the newly generated tokens. Deterministic given weights,
/// prompt, and skip set.
pub fn generate(
    weights: &ModelWeights,
    prompt: &[u32],
    n_new: usize,
    skip: &SkipSet,
    cache: &mut KvCache,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if cache.position() != 0 {
        return Err(Error::Input(
            "generate requires a cache at position 0".into(),
        ));
    }
    let max = weights.config.max_seq_len;
    if prompt.len() + n_new > max {
        return Err(Error::CacheOverflow {
            pos: prompt.len(),
            requested: n_new,
            max_seq_len: max,
        });
    }
    let mut out = forward(weights, prompt, skip, cache, false)?;
    let mut generated = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let last = out.logits.row(out.logits.dims()[0] - 1);
        let tok = argmax(last);
        generated.push(tok);
        // Each emitted token goes through the model, so one generated token
        // costs prefill plus one real decode step and the cache ends at
        // prompt.len() + n_new.
        out = forward(weights, &[tok], skip, cache, false)?;
    }
    Ok(generated)
}
