//! Compute-matched latency benchmarking.
//!
//! The protocol: per configuration, generate seeded random prompts, then time
//! prefill plus one greedy decode step per sequence on a monotonic clock,
//! discarding warmup runs. The unskipped baseline is measured in the same
//! process run, and every row's improvement is relative to it. Prompt content
//! does not affect dense-inference latency, so uniform-random token ids are
//! fine; what matters is that every configuration sees the same prompts.
//!
//! The timing loop is strictly sequential (one sequence at a time). Any
//! internal matmul parallelism runs on the global rayon pool, whose size is
//! fixed for the whole report and recorded in it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{generate, KvCache, ModelWeights};
use crate::report::{render_aligned, verify_csv, Column};
use crate::skip::{config_label, SkipMode, SkipSpec};

/// Benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub prompt_len: usize,
    pub n_sequences: usize,
    /// Untimed runs before measurement, per configuration.
    pub warmup_runs: usize,
    /// Seed for prompt generation.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompt_len: 50,
            n_sequences: 1000,
            warmup_runs: 10,
            seed: 0,
        }
    }
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    /// None for the full-model baseline.
    pub mode: Option<SkipMode>,
    pub k: usize,
    pub keep_last: bool,
    pub mean_s: f64,
    pub std_s: f64,
    /// 100·(t_base − t)/t_base against the same-run baseline; 0 for the
    /// baseline row itself.
    pub improvement_pct: f64,
    pub kv_cache_bytes: usize,
}

/// A full benchmark report. The baseline row always comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub prompt_len: usize,
    pub n_sequences: usize,
    pub warmup_runs: usize,
    pub seed: u64,
    pub threads: usize,
    pub clock_resolution_s: f64,
    /// Set when the clock resolution is coarser than 1% of the smallest
    /// measured mean, i.e. the timings are suspect.
    pub clock_warning: bool,
}

pub const BENCH_CSV_HEADER: &str = "label,mode,k,keep_last,mean_s,std_s,improvement_pct";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.9},{:.9},{:.2}\n",
                r.label,
                r.mode.map(|m| m.short()).unwrap_or("full"),
                r.k,
                r.keep_last,
                r.mean_s,
                r.std_s,
                r.improvement_pct
            ));
        }
        verify_csv(&out, BENCH_CSV_HEADER, BENCH_CSV_COLUMNS).expect("writer emits its own schema");
        out
    }

    /// Aligned table with times scaled by 10², matching the usual layout of
    /// single-token timing tables.
    pub fn render_table(&self) -> String {
        let headers: Vec<String> = ["Config", "Time(s) x10^2", "Std x10^2", "(%)"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format!("{:.2}", r.mean_s * 100.0),
                    format!("{:.2}", r.std_s * 100.0),
                    format!("{:.2}", r.improvement_pct),
                ]
            })
            .collect();
        let mut out = render_aligned(&headers, &rows);
        out.push_str(&format!(
            "\nprompt_len={} n_sequences={} warmup_runs={} seed={} threads={}\n",
            self.prompt_len, self.n_sequences, self.warmup_runs, self.seed, self.threads
        ));
        if let Some(base) = self.rows.first() {
            for r in &self.rows[1..] {
                if r.kv_cache_bytes != base.kv_cache_bytes {
                    out.push_str(&format!(
                        "kv cache {}: {} bytes ({} saved vs baseline)\n",
                        r.label,
                        r.kv_cache_bytes,
                        base.kv_cache_bytes - r.kv_cache_bytes
                    ));
                }
            }
        }
        if self.clock_warning {
            out.push_str(&format!(
                "warning: clock resolution {:.1e}s exceeds 1% of the fastest mean\n",
                self.clock_resolution_s
            ));
        }
        out
    }
}

pub const BENCH_CSV_COLUMNS: &[Column] = &[
    Column::Text,
    Column::Text,
    Column::Int,
    Column::Bool,
    Column::Float,
    Column::Float,
    Column::Float,
];

/// Percentage improvement of `t` over `t_base`: `100·(t_base − t)/t_base`.
pub fn improvement_pct(t_base: f64, t: f64) -> Result<f64> {
    if !(t_base > 0.0) {
        return Err(Error::Domain(format!(
            "baseline time must be positive, got {t_base}"
        )));
    }
    Ok(100.0 * (t_base - t) / t_base)
}

/// Smallest observable positive step of the monotonic clock.
fn clock_resolution() -> f64 {
    let mut min = f64::INFINITY;
    for _ in 0..256 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        min = min.min((t1 - t0).as_secs_f64());
    }
    min
}

/// Runs the timing protocol for every spec. A full-model baseline is measured
/// in the same run — added implicitly if `specs` has none — and every row's
/// improvement is computed against it. The report lists the baseline first.
pub fn run_bench(
    weights: &ModelWeights,
    specs: &[SkipSpec],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if specs.is_empty() {
        return Err(Error::Input("no skip specs to benchmark".into()));
    }
    let model_cfg = &weights.config;
    if cfg.prompt_len == 0 || cfg.n_sequences == 0 {
        return Err(Error::Config(
            "prompt_len and n_sequences must be positive".into(),
        ));
    }
    if cfg.prompt_len + 1 > model_cfg.max_seq_len {
        return Err(Error::Config(format!(
            "prompt_len {} + 1 exceeds max_seq_len {}",
            cfg.prompt_len, model_cfg.max_seq_len
        )));
    }

    let n_layers = model_cfg.n_layers;
    let mut configs: Vec<(Option<SkipSpec>, crate::skip::SkipSet)> = Vec::new();
    for spec in specs {
        let set = spec.resolve(n_layers)?;
        configs.push((Some(spec.clone()), set));
    }
    let baseline_at = configs.iter().position(|(_, set)| set.is_empty());
    let baseline_at = match baseline_at {
        Some(i) => i,
        None => {
            configs.insert(0, (None, crate::skip::SkipSet::empty()));
            0
        }
    };

    // Every configuration times the identical prompt set.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompts: Vec<Vec<u32>> = (0..cfg.n_sequences)
        .map(|_| {
            (0..cfg.prompt_len)
                .map(|_| rng.gen_range(0..model_cfg.vocab_size as u32))
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(configs.len());
    for (spec, set) in &configs {
        let mut cache = KvCache::new(model_cfg, set)?;
        for i in 0..cfg.warmup_runs {
            cache.reset();
            generate(weights, &prompts[i % prompts.len()], 1, set, &mut cache)?;
        }
        let mut times = Vec::with_capacity(cfg.n_sequences);
        for prompt in &prompts {
            cache.reset();
            let t0 = Instant::now();
            generate(weights, prompt, 1, set, &mut cache)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let std = if times.len() > 1 {
            let var =
                times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        rows.push(BenchRow {
            label: config_label(
                spec.as_ref().map(|s| s.mode),
                set,
                spec.as_ref().map(|s| s.keep_last).unwrap_or(false),
                n_layers,
            ),
            mode: if set.is_empty() {
                None
            } else {
                spec.as_ref().map(|s| s.mode)
            },
            k: set.k(),
            keep_last: spec.as_ref().map(|s| s.keep_last).unwrap_or(false) && !set.is_empty(),
            mean_s: mean,
            std_s: std,
            improvement_pct: 0.0,
            kv_cache_bytes: cache.allocated_bytes(),
        });
    }

    let t_base = rows[baseline_at].mean_s;
    for (i, row) in rows.iter_mut().enumerate() {
        row.improvement_pct = if i == baseline_at {
            0.0
        } else {
            improvement_pct(t_base, row.mean_s)?
        };
    }
    let base_row = rows.remove(baseline_at);
    rows.insert(0, base_row);

    let clock_resolution_s = clock_resolution();
    let fastest = rows.iter().map(|r| r.mean_s).fold(f64::INFINITY, f64::min);
    Ok(BenchReport {
        rows,
        prompt_len: cfg.prompt_len,
        n_sequences: cfg.n_sequences,
        warmup_runs: cfg.warmup_runs,
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        clock_resolution_s,
        clock_warning: clock_resolution_s > 0.01 * fastest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use crate::skip::SkipAmount;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
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
    fn improvement_examples() {
        // Same-table baseline with three published timing cells.
        assert!((improvement_pct(0.48, 0.3236).unwrap() - 32.58).abs() < 0.01);
        assert!((improvement_pct(0.4676, 0.3672).unwrap() - 21.47).abs() < 0.01);
        assert!((improvement_pct(0.4676, 0.3135).unwrap() - 32.96).abs() < 0.01);
        assert_eq!(improvement_pct(0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn improvement_rejects_nonpositive_baseline() {
        assert!(matches!(improvement_pct(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(improvement_pct(-1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_spec_list_is_input_error() {
        let w = init_random(&tiny(), 0).unwrap();
        assert!(matches!(
            run_bench(&w, &[], &BenchConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn baseline_added_implicitly_and_first() {
        let w = init_random(&tiny(), 1).unwrap();
        let cfg = BenchConfig {
            prompt_len: 4,
            n_sequences: 3,
            warmup_runs: 1,
            seed: 9,
        };
        let specs = vec![SkipSpec::count(SkipMode::Attention, 1)];
        let report = run_bench(&w, &specs, &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].label, "100% full");
        assert_eq!(report.rows[0].improvement_pct, 0.0);
        assert_eq!(report.rows[1].mode, Some(SkipMode::Attention));
        assert_eq!(report.rows[1].k, 1);
        // Attention-skipped layer drops its kv storage.
        assert!(report.rows[1].kv_cache_bytes < report.rows[0].kv_cache_bytes);
    }

    #[test]
    fn explicit_baseline_is_used_in_place() {
        let w = init_random(&tiny(), 1).unwrap();
        let cfg = BenchConfig {
            prompt_len: 4,
            n_sequences: 2,
            warmup_runs: 0,
            seed: 9,
        };
        let specs = vec![
            SkipSpec::count(SkipMode::Mlp, 1),
            SkipSpec::count(SkipMode::Block, 0),
        ];
        let report = run_bench(&w, &specs, &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].improvement_pct, 0.0);
        assert_eq!(report.rows[0].k, 0);
    }

    #[test]
    fn csv_schema_round_trips() {
        let w = init_random(&tiny(), 1).unwrap();
        let cfg = BenchConfig {
            prompt_len: 3,
            n_sequences: 2,
            warmup_runs: 0,
            seed: 1,
        };
        let specs = vec![SkipSpec::new(
            SkipMode::Block,
            SkipAmount::KeepFraction(0.5),
            true,
        )];
        let report = run_bench(&w, &specs, &cfg).unwrap();
        let csv = report.to_csv();
        verify_csv(&csv, BENCH_CSV_HEADER, BENCH_CSV_COLUMNS).unwrap();
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("50% block +last,block,1,true,"));
        let table = report.render_table();
        assert!(table.contains("Time(s) x10^2"));
    }

    #[test]
    fn prompts_are_seed_deterministic() {
        let w = init_random(&tiny(), 1).unwrap();
        let cfg = BenchConfig {
            prompt_len: 4,
            n_sequences: 2,
            warmup_runs: 0,
            seed: 77,
        };
        // Exercised indirectly: two runs with one seed produce rows with the
        // same labels and kv sizes; timings differ but the structure is fixed.
        let a = run_bench(&w, &[SkipSpec::count(SkipMode::Block, 1)], &cfg).unwrap();
        let b = run_bench(&w, &[SkipSpec::count(SkipMode::Block, 1)], &cfg).unwrap();
        let strip = |r: &BenchReport| -> Vec<(String, usize)> {
            r.rows
                .iter()
                .map(|x| (x.label.clone(), x.kv_cache_bytes))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn prompt_len_must_fit_cache() {
        let w = init_random(&tiny(), 1).unwrap();
        let cfg = BenchConfig {
            prompt_len: tiny().max_seq_len,
            n_sequences: 1,
            warmup_runs: 0,
            seed: 0,
        };
        assert!(matches!(
            run_bench(&w, &[SkipSpec::count(SkipMode::Block, 0)], &cfg),
            Err(Error::Config(_))
        ));
    }
}
