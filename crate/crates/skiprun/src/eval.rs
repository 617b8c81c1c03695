//! Desk-scale quality evaluation: perplexity over a token corpus and
//! multiple-choice accuracy by summed log-likelihood ranking.
//!
//! Tasks are token-id-level files (no tokenizer): one JSON object per line,
//! `{"context":[ints],"choices":[[ints],...],"gold":int}`. Corpora are
//! whitespace-separated token ids.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{forward, KvCache, ModelWeights};
use crate::report::{render_aligned, verify_csv, Column};
use crate::skip::{config_label, SkipMode, SkipSpec};
use crate::tensor::Tensor;

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McItem {
    pub context: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub gold: usize,
}

/// A validated multiple-choice task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McTask {
    items: Vec<McItem>,
}

impl McTask {
    /// Validates every item: at least two choices, gold index in range, and a
    /// non-empty context (the first choice token needs something to condition
    /// on). Empty *choices* are legal; scoring skips those items.
    pub fn from_items(items: Vec<McItem>) -> Result<Self> {
        for (i, item) in items.iter().enumerate() {
            if item.choices.len() < 2 {
                return Err(Error::Input(format!(
                    "item {i}: needs at least 2 choices, has {}",
                    item.choices.len()
                )));
            }
            if item.gold >= item.choices.len() {
                return Err(Error::Input(format!(
                    "item {i}: gold index {} out of range for {} choices",
                    item.gold,
                    item.choices.len()
                )));
            }
            if item.context.is_empty() {
                return Err(Error::Input(format!("item {i}: empty context")));
            }
        }
        Ok(McTask { items })
    }

    pub fn items(&self) -> &[McItem] {
        &self.items
    }

    /// Parses line-delimited JSON, one item per line.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct RawItem {
            context: Vec<u32>,
            choices: Vec<Vec<u32>>,
            gold: usize,
        }
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("task line {}: {e}", lineno + 1)))?;
            items.push(McItem {
                context: raw.context,
                choices: raw.choices,
                gold: raw.gold,
            });
        }
        McTask::from_items(items)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        McTask::parse(&std::fs::read_to_string(path)?)
    }
}

/// Parses a whitespace-separated token-id corpus.
pub fn parse_corpus(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>()
                .map_err(|_| Error::Input(format!("corpus token `{tok}` is not an integer")))
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<std::path::Path>) -> Result<Vec<u32>> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

/// Log-probabilities of each next token: `log_probs[t][v]` is
/// `log p(v | tokens ≤ t)`, computed from the logits row in f64.
fn log_softmax_row(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    logits[target] as f64 - max - sum.ln()
}

fn full_forward_logits(
    weights: &ModelWeights,
    skip: &SkipSpecResolved,
    tokens: &[u32],
) -> Result<Tensor> {
    let mut cache = KvCache::new(&weights.config, &skip.set)?;
    Ok(forward(weights, tokens, &skip.set, &mut cache, false)?.logits)
}

/// A spec together with its resolved set, so the resolution happens once.
struct SkipSpecResolved {
    set: crate::skip::SkipSet,
}

fn resolve(weights: &ModelWeights, skip: &SkipSpec) -> Result<SkipSpecResolved> {
    Ok(SkipSpecResolved {
        set: skip.resolve(weights.config.n_layers)?,
    })
}

/// Teacher-forced perplexity of `corpus`:
/// `exp(mean over t ≥ 1 of −log p(corpus[t] | corpus[<t]))`.
pub fn perplexity(weights: &ModelWeights, skip: &SkipSpec, corpus: &[u32]) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Input(format!(
            "perplexity needs a corpus of at least 2 tokens, got {}",
            corpus.len()
        )));
    }
    if corpus.len() > weights.config.max_seq_len {
        return Err(Error::Input(format!(
            "corpus of {} tokens exceeds max_seq_len {}",
            corpus.len(),
            weights.config.max_seq_len
        )));
    }
    let skip = resolve(weights, skip)?;
    let logits = full_forward_logits(weights, &skip, corpus)?;
    let mut nll = 0.0f64;
    for t in 1..corpus.len() {
        nll -= log_softmax_row(logits.row(t - 1), corpus[t] as usize);
    }
    Ok((nll / (corpus.len() - 1) as f64).exp())
}

/// How choice log-likelihoods are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChoiceScoring {
    /// Raw summed log-probability of the choice tokens.
    #[default]
    RawSum,
    /// Sum divided by choice length (length-normalized).
    PerToken,
}

/// Multiple-choice outcome for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct McOutcome {
    /// 100 · correct / scored.
    pub accuracy_pct: f64,
    pub n_items: usize,
    pub n_scored: usize,
    /// Items skipped because some choice had no tokens.
    pub n_skipped: usize,
}

/// Scores every item: each choice's tokens are appended to the context and
/// their conditional log-probabilities summed; the highest-scoring choice is
/// predicted, ties breaking toward the lowest choice index.
pub fn mc_score(
    weights: &ModelWeights,
    skip: &SkipSpec,
    task: &McTask,
    scoring: ChoiceScoring,
) -> Result<McOutcome> {
    let skip = resolve(weights, skip)?;
    let mut n_scored = 0usize;
    let mut n_skipped = 0usize;
    let mut correct = 0usize;
    for item in task.items() {
        if item.choices.iter().any(|c| c.is_empty()) {
            n_skipped += 1;
            continue;
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (ci, choice) in item.choices.iter().enumerate() {
            let mut seq = item.context.clone();
            seq.extend_from_slice(choice);
            if seq.len() > weights.config.max_seq_len {
                return Err(Error::Input(format!(
                    "context + choice of {} tokens exceeds max_seq_len {}",
                    seq.len(),
                    weights.config.max_seq_len
                )));
            }
            let logits = full_forward_logits(weights, &skip, &seq)?;
            let ctx = item.context.len();
            let mut score = 0.0f64;
            for (j, &tok) in choice.iter().enumerate() {
                score += log_softmax_row(logits.row(ctx + j - 1), tok as usize);
            }
            if scoring == ChoiceScoring::PerToken {
                score /= choice.len() as f64;
            }
            if score > best_score {
                best_score = score;
                best = ci;
            }
        }
        n_scored += 1;
        if best == item.gold {
            correct += 1;
        }
    }
    if n_scored == 0 {
        return Err(Error::Input("no scorable items in task".into()));
    }
    Ok(McOutcome {
        accuracy_pct: 100.0 * correct as f64 / n_scored as f64,
        n_items: task.items().len(),
        n_scored,
        n_skipped,
    })
}

/// Arithmetic mean of task metrics — the Average column.
pub fn task_average(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One row of an evaluation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub mode: Option<SkipMode>,
    pub k: usize,
    pub keep_last: bool,
    pub perplexity: Option<f64>,
    pub task_accuracy: Vec<f64>,
    pub n_skipped: Vec<usize>,
    /// Mean of the task accuracies; absent when there are no tasks.
    pub average: Option<f64>,
}

/// Metric table over (spec × task), with an Average column.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task_names: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub scoring: ChoiceScoring,
}

impl EvalReport {
    /// Header: `label,mode,k,keep_last,perplexity,<task columns>,average`.
    pub fn csv_header(&self) -> String {
        let mut h = String::from("label,mode,k,keep_last,perplexity");
        for name in &self.task_names {
            h.push(',');
            h.push_str(name);
        }
        h.push_str(",average");
        h
    }

    pub fn csv_columns(&self) -> Vec<Column> {
        let mut cols = vec![
            Column::Text,
            Column::Text,
            Column::Int,
            Column::Bool,
            Column::OptFloat,
        ];
        cols.extend(std::iter::repeat(Column::Float).take(self.task_names.len()));
        cols.push(Column::OptFloat);
        cols
    }

    pub fn to_csv(&self) -> String {
        let header = self.csv_header();
        let mut out = header.clone();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                r.label,
                r.mode.map(|m| m.short()).unwrap_or("full"),
                r.k,
                r.keep_last
            ));
            match r.perplexity {
                Some(p) => out.push_str(&format!(",{p:.4}")),
                None => out.push(','),
            }
            for a in &r.task_accuracy {
                out.push_str(&format!(",{a:.1}"));
            }
            match r.average {
                Some(a) => out.push_str(&format!(",{a:.1}\n")),
                None => out.push_str(",\n"),
            }
        }
        verify_csv(&out, &header, &self.csv_columns()).expect("writer emits its own schema");
        out
    }

    /// Aligned table, metrics to one decimal place.
    pub fn render_table(&self) -> String {
        let mut headers = vec!["Config".to_string()];
        if self.rows.iter().any(|r| r.perplexity.is_some()) {
            headers.push("Perplexity".into());
        }
        headers.extend(self.task_names.iter().cloned());
        if !self.task_names.is_empty() {
            headers.push("Average".into());
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.label.clone()];
                if headers.contains(&"Perplexity".to_string()) {
                    cells.push(r.perplexity.map(|p| format!("{p:.1}")).unwrap_or_default());
                }
                cells.extend(r.task_accuracy.iter().map(|a| format!("{a:.1}")));
                if let Some(a) = r.average {
                    cells.push(format!("{a:.1}"));
                }
                cells
            })
            .collect();
        render_aligned(&headers, &rows)
    }
}

/// Evaluates every spec over the given tasks and/or corpus.
pub fn eval_sweep(
    weights: &ModelWeights,
    specs: &[SkipSpec],
    tasks: &[(String, McTask)],
    corpus: Option<&[u32]>,
    scoring: ChoiceScoring,
) -> Result<EvalReport> {
    if specs.is_empty() {
        return Err(Error::Input("no skip specs to evaluate".into()));
    }
    if tasks.is_empty() && corpus.is_none() {
        return Err(Error::Input(
            "nothing to evaluate: no tasks and no corpus".into(),
        ));
    }
    let n_layers = weights.config.n_layers;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let set = spec.resolve(n_layers)?;
        let ppl = corpus.map(|c| perplexity(weights, spec, c)).transpose()?;
        let mut task_accuracy = Vec::with_capacity(tasks.len());
        let mut n_skipped = Vec::with_capacity(tasks.len());
        for (_, task) in tasks {
            let outcome = mc_score(weights, spec, task, scoring)?;
            task_accuracy.push(outcome.accuracy_pct);
            n_skipped.push(outcome.n_skipped);
        }
        let average = (!task_accuracy.is_empty()).then(|| task_average(&task_accuracy));
        rows.push(EvalRow {
            label: config_label(Some(spec.mode), &set, spec.keep_last, n_layers),
            mode: if set.is_empty() {
                None
            } else {
                Some(spec.mode)
            },
            k: set.k(),
            keep_last: spec.keep_last && !set.is_empty(),
            perplexity: ppl,
            task_accuracy,
            n_skipped,
            average,
        });
    }
    Ok(EvalReport {
        task_names: tasks.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        scoring,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use crate::skip::SkipMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 40,
            vocab_size: 13,
            max_seq_len: 32,
            rope_theta_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn full() -> SkipSpec {
        SkipSpec::count(SkipMode::Block, 0)
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let cfg = tiny();
        let mut w = init_random(&cfg, 3).unwrap();
        // Zero lm-head: every logit row is constant, predictions are uniform.
        w.lm_head.data_mut().fill(0.0);
        let corpus: Vec<u32> = (0..20).map(|i| i % cfg.vocab_size as u32).collect();
        let ppl = perplexity(&w, &full(), &corpus).unwrap();
        let expect = cfg.vocab_size as f64;
        assert!((ppl - expect).abs() / expect < 1e-3, "{ppl}");
    }

    #[test]
    fn perplexity_needs_two_tokens() {
        let w = init_random(&tiny(), 0).unwrap();
        assert!(matches!(
            perplexity(&w, &full(), &[1]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn perplexity_matches_independent_nll_oracle() {
        let w = init_random(&tiny(), 11).unwrap();
        let corpus: Vec<u32> = vec![5, 1, 9, 0, 12, 3, 3, 8];
        let ppl = perplexity(&w, &full(), &corpus).unwrap();

        // Oracle: collect logits once, then accumulate per-token
        // log-probabilities with an independent softmax in f64.
        let set = crate::skip::SkipSet::empty();
        let mut cache = KvCache::new(&w.config, &set).unwrap();
        let logits = forward(&w, &corpus, &set, &mut cache, false)
            .unwrap()
            .logits;
        let mut nll = 0.0f64;
        for t in 1..corpus.len() {
            let row = logits.row(t - 1);
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            nll -= (exps[corpus[t] as usize] / z).ln();
        }
        let expect = (nll / (corpus.len() - 1) as f64).exp();
        assert!((ppl - expect).abs() / expect < 1e-4, "{ppl} vs {expect}");
    }

    #[test]
    fn perplexity_is_at_least_one_and_skip_identity_holds() {
        let w = init_random(&tiny(), 4).unwrap();
        let corpus: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let a = perplexity(&w, &full(), &corpus).unwrap();
        assert!(a >= 1.0);
        for mode in [SkipMode::Block, SkipMode::Attention, SkipMode::Mlp] {
            let b = perplexity(&w, &SkipSpec::count(mode, 0), &corpus).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identical_choices_tie_break_to_first() {
        let w = init_random(&tiny(), 5).unwrap();
        let items = (0..4)
            .map(|i| McItem {
                context: vec![1, 2],
                choices: vec![vec![3, 4], vec![3, 4], vec![3, 4]],
                gold: i % 3,
            })
            .collect();
        let task = McTask::from_items(items).unwrap();
        let out = mc_score(&w, &full(), &task, ChoiceScoring::RawSum).unwrap();
        // Prediction is always choice 0; gold is 0 for items 0 and 3.
        assert_eq!(out.accuracy_pct, 50.0);
        assert_eq!(out.n_scored, 4);
    }

    /// Hand-built logit table: identical embedding rows make the hidden state
    /// token-independent, and the lm-head gives token 1 probability 0.9.
    #[test]
    fn hand_constructed_two_token_model_scores_100() {
        let cfg = ModelConfig {
            vocab_size: 2,
            ..tiny()
        };
        let mut w = init_random(&cfg, 6).unwrap();
        let d = cfg.d_model;
        for row in 0..cfg.vocab_size {
            for c in 0..d {
                w.embed.data_mut()[row * d + c] = 1.0;
            }
        }
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
        w.final_norm.data_mut().fill(1.0);
        // Column 0 → logit 0; column 1 → logit ln 9, so p(1) = 0.9.
        let gap = 9.0f32.ln() / d as f32;
        for r in 0..d {
            w.lm_head.data_mut()[r * 2] = 0.0;
            w.lm_head.data_mut()[r * 2 + 1] = gap;
        }
        let p = perplexity(&w, &full(), &[0, 1, 1, 1]).unwrap();
        assert!((p - 1.0 / 0.9).abs() < 1e-4, "{p}");

        let items = (0..5)
            .map(|_| McItem {
                context: vec![0],
                choices: vec![vec![0, 0], vec![1, 1]],
                gold: 1,
            })
            .collect();
        let task = McTask::from_items(items).unwrap();
        let out = mc_score(&w, &full(), &task, ChoiceScoring::RawSum).unwrap();
        assert_eq!(out.accuracy_pct, 100.0);
    }

    #[test]
    fn empty_choice_items_are_skipped_and_counted() {
        let w = init_random(&tiny(), 5).unwrap();
        let task = McTask::from_items(vec![
            McItem {
                context: vec![1],
                choices: vec![vec![], vec![2]],
                gold: 1,
            },
            McItem {
                context: vec![1],
                choices: vec![vec![2], vec![3]],
                gold: 0,
            },
        ])
        .unwrap();
        let out = mc_score(&w, &full(), &task, ChoiceScoring::RawSum).unwrap();
        assert_eq!(out.n_skipped, 1);
        assert_eq!(out.n_scored, 1);
    }

    #[test]
    fn item_order_does_not_change_accuracy() {
        let w = init_random(&tiny(), 8).unwrap();
        let items: Vec<McItem> = (0..6)
            .map(|i| McItem {
                context: vec![i as u32 % 13, 3],
                choices: vec![vec![i as u32 % 13], vec![(i as u32 + 5) % 13]],
                gold: (i % 2) as usize,
            })
            .collect();
        let fwd = McTask::from_items(items.clone()).unwrap();
        let rev = McTask::from_items(items.into_iter().rev().collect()).unwrap();
        let a = mc_score(&w, &full(), &fwd, ChoiceScoring::RawSum).unwrap();
        let b = mc_score(&w, &full(), &rev, ChoiceScoring::RawSum).unwrap();
        assert_eq!(a.accuracy_pct, b.accuracy_pct);
    }

    #[test]
    fn task_validation_errors() {
        assert!(McTask::from_items(vec![McItem {
            context: vec![1],
            choices: vec![vec![2]],
            gold: 0,
        }])
        .is_err());
        assert!(McTask::from_items(vec![McItem {
            context: vec![1],
            choices: vec![vec![2], vec![3]],
            gold: 2,
        }])
        .is_err());
        assert!(McTask::from_items(vec![McItem {
            context: vec![],
            choices: vec![vec![2], vec![3]],
            gold: 0,
        }])
        .is_err());
    }

    #[test]
    fn task_jsonl_parsing() {
        let text = r#"{"context":[1,2],"choices":[[3],[4,5]],"gold":1}

{"context":[9],"choices":[[0],[1]],"gold":0}"#;
        let task = McTask::parse(text).unwrap();
        assert_eq!(task.items().len(), 2);
        assert_eq!(task.items()[0].choices[1], vec![4, 5]);
        let err = McTask::parse("{\"bad\":1}").unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn corpus_parsing() {
        assert_eq!(parse_corpus("1 2\n3\t4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_corpus("1 x 3").is_err());
    }

    #[test]
    fn sweep_shapes_and_average() {
        let w = init_random(&tiny(), 9).unwrap();
        let task = McTask::from_items(
            (0..3)
                .map(|i| McItem {
                    context: vec![1, i as u32],
                    choices: vec![vec![2], vec![3]],
                    gold: 0,
                })
                .collect(),
        )
        .unwrap();
        let corpus: Vec<u32> = vec![1, 2, 3, 4, 5];
        let specs = vec![full(), SkipSpec::count(SkipMode::Attention, 1)];
        let report = eval_sweep(
            &w,
            &specs,
            &[("taskA".into(), task.clone()), ("taskB".into(), task)],
            Some(&corpus),
            ChoiceScoring::RawSum,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].label, "100% full");
        for row in &report.rows {
            assert_eq!(row.task_accuracy.len(), 2);
            let avg = row.average.unwrap();
            assert!((avg - task_average(&row.task_accuracy)).abs() < 1e-12);
            assert!(row.perplexity.unwrap() >= 1.0);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("label,mode,k,keep_last,perplexity,taskA,taskB,average"));
        let table = report.render_table();
        assert!(table.contains("Average"));
    }

    #[test]
    fn average_examples_reproduce_published_rows() {
        let a = task_average(&[35.2, 46.8, 46.2, 40.3]);
        assert!((a - 42.1).abs() <= 0.05 + 1e-9);
        let b = task_average(&[51.2, 77.0, 42.2, 39.4]);
        assert!((b - 52.5).abs() <= 0.05 + 1e-9);
    }
}
