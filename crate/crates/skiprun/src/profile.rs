//! Layer-redundancy profiling: how similar is each layer's output to the
//! previous layer's output?
//!
//! For every prompt the full model runs once with hidden-state capture; for
//! each layer i and token position the cosine between the post-block stream
//! at layer i and at layer i−1 (layer 0 being the embedding output) is
//! aggregated into a per-layer mean. A value near 1 means the layer barely
//! moved the stream.

use crate::error::{Error, Result};
use crate::model::{forward, KvCache, ModelWeights};
use crate::skip::SkipSet;

/// Norms below this are treated as undefined direction.
const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity `u·v / (‖u‖·‖v‖)`, accumulated in f64 and clamped to
/// [−1, 1]. Near-zero-norm inputs yield [`Error::UndefinedSimilarity`].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-layer mean cosine similarity with the previous layer's features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    /// `similarities[i]` is the mean for layer i+1 (1-based layer i+1 vs i).
    pub similarities: Vec<f64>,
    /// Cosines aggregated per layer.
    pub n_samples: Vec<usize>,
    /// Pairs excluded per layer because a norm fell below the floor.
    pub n_excluded: Vec<usize>,
    pub n_prompts: usize,
    pub n_tokens: usize,
}

impl SimilarityProfile {
    /// CSV with header `layer,cosine_sim,n_samples`, six decimal places,
    /// one row per layer (1-based).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,cosine_sim,n_samples\n");
        for (i, (s, n)) in self.similarities.iter().zip(&self.n_samples).enumerate() {
            out.push_str(&format!("{},{:.6},{}\n", i + 1, s, n));
        }
        out
    }
}

/// Profiles the full (unskipped) model over `prompts`, averaging per-token
/// cosines across all positions and prompts. Deterministic given weights and
/// prompts; prompt order does not matter beyond float summation order.
pub fn profile(weights: &ModelWeights, prompts: &[Vec<u32>]) -> Result<SimilarityProfile> {
    if prompts.is_empty() {
        return Err(Error::Input("no prompts to profile".into()));
    }
    let l = weights.config.n_layers;
    let d = weights.config.d_model;
    let mut sums = vec![0.0f64; l];
    let mut counts = vec![0usize; l];
    let mut excluded = vec![0usize; l];
    let mut n_tokens = 0usize;

    let skip = SkipSet::empty();
    for prompt in prompts {
        let mut cache = KvCache::new(&weights.config, &skip)?;
        let out = forward(weights, prompt, &skip, &mut cache, true)?;
        let states = out.hidden_states.expect("capture was requested");
        n_tokens += prompt.len();
        for layer in 0..l {
            let prev = &states[layer];
            let cur = &states[layer + 1];
            for pos in 0..prompt.len() {
                match cosine(
                    &cur.data()[pos * d..(pos + 1) * d],
                    &prev.data()[pos * d..(pos + 1) * d],
                ) {
                    Ok(c) => {
                        sums[layer] += c;
                        counts[layer] += 1;
                    }
                    Err(Error::UndefinedSimilarity) => excluded[layer] += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let mut similarities = Vec::with_capacity(l);
    for layer in 0..l {
        if counts[layer] == 0 {
            return Err(Error::Domain(format!(
                "layer {}: every hidden-state pair had near-zero norm",
                layer + 1
            )));
        }
        similarities.push(sums[layer] / counts[layer] as f64);
    }
    Ok(SimilarityProfile {
        similarities,
        n_samples: counts,
        n_excluded: excluded,
        n_prompts: prompts.len(),
        n_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};

    fn tiny() -> ModelConfig {
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

    #[test]
    fn cosine_of_self_is_one() {
        let x = [0.3f32, -2.0, 5.5];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_and_diagonal() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn cosine_near_zero_norm_is_undefined() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
        assert!(matches!(
            cosine(&[1e-13, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn cosine_length_mismatch() {
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }

    /// Every block tensor zeroed: residual updates vanish, so each layer's
    /// features equal the previous layer's and every similarity is 1.
    #[test]
    fn zero_update_model_profiles_to_ones() {
        let mut w = init_random(&tiny(), 4).unwrap();
        for layer in &mut w.layers {
            for t in [
                &mut layer.attn.wq,
                &mut layer.attn.wk,
                &mut layer.attn.wv,
                &mut layer.attn.wo,
                &mut layer.attn.norm,
                &mut layer.mlp.gate,
                &mut layer.mlp.up,
                &mut layer.mlp.down,
                &mut layer.mlp.norm,
            ] {
                t.data_mut().fill(0.0);
            }
        }
        let prompts = vec![vec![1u32, 2, 3], vec![9, 9]];
        let p = profile(&w, &prompts).unwrap();
        assert_eq!(p.similarities.len(), tiny().n_layers);
        for s in &p.similarities {
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
        assert_eq!(p.n_prompts, 2);
        assert_eq!(p.n_tokens, 5);
    }

    #[test]
    fn single_token_prompt_gives_one_sample_per_layer() {
        let w = init_random(&tiny(), 6).unwrap();
        let p = profile(&w, &[vec![5u32]]).unwrap();
        assert!(p.n_samples.iter().all(|&n| n == 1));
        assert!(p.similarities.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn prompt_order_does_not_matter() {
        let w = init_random(&tiny(), 7).unwrap();
        let a = vec![vec![1u32, 2, 3, 4], vec![7u32, 7], vec![0u32, 30, 15]];
        let b: Vec<Vec<u32>> = a.iter().rev().cloned().collect();
        let pa = profile(&w, &a).unwrap();
        let pb = profile(&w, &b).unwrap();
        for (x, y) in pa.similarities.iter().zip(&pb.similarities) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_prompt_list_is_input_error() {
        let w = init_random(&tiny(), 0).unwrap();
        assert!(matches!(profile(&w, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn csv_layout() {
        let p = SimilarityProfile {
            similarities: vec![0.25, 0.9999995],
            n_samples: vec![10, 10],
            n_excluded: vec![0, 0],
            n_prompts: 2,
            n_tokens: 5,
        };
        let csv = p.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,cosine_sim,n_samples"));
        assert_eq!(lines.next(), Some("1,0.250000,10"));
        assert_eq!(lines.next(), Some("2,1.000000,10"));
    }
}
