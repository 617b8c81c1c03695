//! `skiprun` — synthesize models, plan sublayer skips, and run the profiling,
//! benchmarking, and evaluation harnesses.
//!
//! Exit codes: 0 success, 1 I/O failure (missing or unreadable files),
//! 2 configuration or parse failure. `SKIPRUN_THREADS` pins the internal
//! thread pool, which keeps benchmark runs comparable across invocations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use skiprun::bench::{run_bench, BenchConfig};
use skiprun::eval::{eval_sweep, load_corpus, ChoiceScoring, McTask};
use skiprun::model::{init_random, load_checkpoint, save_checkpoint, ModelConfig, ModelWeights};
use skiprun::profile::profile;
use skiprun::skip::{describe, SkipSpec};
use skiprun::{Error, SkipMode};

#[derive(Parser)]
#[command(
    name = "skiprun",
    version,
    about = "Transformer inference with deep-layer sublayer skipping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a random checkpoint from a model config
    Synth(SynthArgs),
    /// Show which (layer, sublayer) pairs a skip spec resolves to
    Plan(PlanArgs),
    /// Per-layer cosine-similarity profile of the full model
    Profile(ProfileArgs),
    /// Compute-matched single-token latency benchmark
    Bench(BenchArgs),
    /// Perplexity and multiple-choice accuracy per skip configuration
    Eval(EvalArgs),
}

/// Values readable from a JSON run-config file; flags override these.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<String>,
    spec: Option<String>,
    specs: Option<Vec<String>>,
    layers: Option<usize>,
    checkpoint: Option<PathBuf>,
    synth_config: Option<PathBuf>,
    synth_seed: Option<u64>,
    prompts: Option<PathBuf>,
    prompt_len: Option<usize>,
    sequences: Option<usize>,
    warmup: Option<usize>,
    tasks: Option<Vec<PathBuf>>,
    corpus: Option<PathBuf>,
    score_norm: Option<String>,
}

impl RunFile {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(RunFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(Error::from)
            }
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Model config JSON file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run-config file; flags override its values
    #[arg(long)]
    run_config: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Skip spec, e.g. `attn,k=3,keep_last=false` or `block,keep=0.75`
    #[arg(long)]
    spec: Option<String>,
    /// Layer count L to resolve against
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    run_config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelSource {
    /// Load weights from a checkpoint file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Synthesize weights from this model config JSON instead
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Seed for --synth-config
    #[arg(long)]
    synth_seed: Option<u64>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Prompt file: one prompt per line, whitespace-separated token ids
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// CSV output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Skip spec (repeatable); a full-model baseline is added automatically
    #[arg(long = "spec")]
    specs: Vec<String>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Sequences to time per configuration
    #[arg(long)]
    sequences: Option<usize>,
    /// Untimed warmup runs per configuration
    #[arg(long)]
    warmup: Option<usize>,
    /// Seed for prompt generation
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `table` or `csv`
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    run_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Skip spec (repeatable); defaults to the full model only
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// Multiple-choice task file (repeatable), one JSON item per line
    #[arg(long = "task")]
    tasks: Vec<PathBuf>,
    /// Token-id corpus file for perplexity
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Choice ranking: `raw` (summed log-likelihood) or `per-token`
    #[arg(long)]
    score_norm: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `table` or `csv`
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    run_config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = pin_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::Structure(_) => 1,
        _ => 2,
    }
}

/// SKIPRUN_THREADS pins the rayon pool; unset leaves the default.
fn pin_threads() -> Result<(), Error> {
    match std::env::var("SKIPRUN_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!(
                    "SKIPRUN_THREADS must be a positive integer, got `{v}`"
                ))
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
        }
    }
}

fn load_model_config(path: &Path) -> Result<ModelConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let file = RunFile::load(args.run_config.as_deref())?;
    let config_path = args
        .config
        .or(file.config)
        .ok_or_else(|| Error::Config("synth needs --config <model config JSON>".into()))?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| Error::Config("synth needs --out <checkpoint path>".into()))?;
    let config = load_model_config(&config_path)?;
    let weights = init_random(&config, seed)?;
    save_checkpoint(&weights, &config, &out)?;
    println!("tensors: {}", 2 + 9 * config.n_layers + 2);
    println!("parameters: {}", weights.n_params());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<(), Error> {
    let file = RunFile::load(args.run_config.as_deref())?;
    let spec_text = args
        .spec
        .or(file.spec)
        .ok_or_else(|| Error::Config("plan needs --spec".into()))?;
    let layers = args
        .layers
        .or(file.layers)
        .ok_or_else(|| Error::Config("plan needs --layers".into()))?;
    let spec = SkipSpec::parse(&spec_text)?;
    let set = spec.resolve(layers)?;
    let summary = describe(&set, layers);
    let fmt = |ls: Vec<usize>| -> String {
        if ls.is_empty() {
            "none".into()
        } else {
            ls.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        }
    };
    println!("spec: {spec_text}");
    println!("k: {}", summary.k);
    println!("label: {}", summary.label());
    println!("attention skipped: {}", fmt(set.attention_layers()));
    println!("mlp skipped: {}", fmt(set.mlp_layers()));
    Ok(())
}

fn load_model(src: &ModelSource, file: &RunFile) -> Result<ModelWeights, Error> {
    let checkpoint = src.checkpoint.clone().or_else(|| file.checkpoint.clone());
    let synth_config = src
        .synth_config
        .clone()
        .or_else(|| file.synth_config.clone());
    match (checkpoint, synth_config) {
        (Some(path), None) => Ok(load_checkpoint(path)?.1),
        (None, Some(path)) => {
            let seed = src.synth_seed.or(file.synth_seed).unwrap_or(0);
            let config = load_model_config(&path)?;
            init_random(&config, seed)
        }
        (Some(_), Some(_)) => Err(Error::Config(
            "give either --checkpoint or --synth-config, not both".into(),
        )),
        (None, None) => Err(Error::Config(
            "a model is required: --checkpoint <file> or --synth-config <file>".into(),
        )),
    }
}

fn parse_specs(texts: &[String]) -> Result<Vec<SkipSpec>, Error> {
    texts.iter().map(|t| SkipSpec::parse(t)).collect()
}

fn load_prompts(path: &Path) -> Result<Vec<Vec<u32>>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut prompts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let prompt: Result<Vec<u32>, Error> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::Input(format!(
                        "prompt line {}: `{tok}` is not a token id",
                        lineno + 1
                    ))
                })
            })
            .collect();
        prompts.push(prompt?);
    }
    Ok(prompts)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_profile(args: ProfileArgs) -> Result<(), Error> {
    let file = RunFile::load(args.run_config.as_deref())?;
    let weights = load_model(&args.model, &file)?;
    let prompts_path = args
        .prompts
        .or(file.prompts)
        .ok_or_else(|| Error::Config("profile needs --prompts <file>".into()))?;
    let prompts = load_prompts(&prompts_path)?;
    let profile = profile(&weights, &prompts)?;
    write_or_print(args.out.or(file.out).as_deref(), &profile.to_csv())
}

#[derive(Clone, Copy, PartialEq)]
enum Format {
    Table,
    Csv,
}

fn parse_format(flag: Option<String>, file: Option<String>) -> Result<Format, Error> {
    match flag.or(file).as_deref() {
        None | Some("table") => Ok(Format::Table),
        Some("csv") => Ok(Format::Csv),
        Some(other) => Err(Error::Config(format!(
            "format must be `table` or `csv`, got `{other}`"
        ))),
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let file = RunFile::load(args.run_config.as_deref())?;
    let weights = load_model(&args.model, &file)?;
    let spec_texts = if args.specs.is_empty() {
        file.specs.clone().unwrap_or_default()
    } else {
        args.specs.clone()
    };
    let mut specs = parse_specs(&spec_texts)?;
    if specs.is_empty() {
        // Nothing requested: time the full model alone.
        specs.push(SkipSpec::count(SkipMode::Block, 0));
    }
    let cfg = BenchConfig {
        prompt_len: args.prompt_len.or(file.prompt_len).unwrap_or(50),
        n_sequences: args.sequences.or(file.sequences).unwrap_or(1000),
        warmup_runs: args.warmup.or(file.warmup).unwrap_or(10),
        seed: args.seed.or(file.seed).unwrap_or(0),
    };
    let report = run_bench(&weights, &specs, &cfg)?;
    let format = parse_format(args.format, file.format)?;
    let content = match format {
        Format::Table => report.render_table(),
        Format::Csv => report.to_csv(),
    };
    write_or_print(args.out.or(file.out).as_deref(), &content)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let file = RunFile::load(args.run_config.as_deref())?;
    let weights = load_model(&args.model, &file)?;
    let spec_texts = if args.specs.is_empty() {
        file.specs.clone().unwrap_or_default()
    } else {
        args.specs.clone()
    };
    let mut specs = parse_specs(&spec_texts)?;
    if specs.is_empty() {
        specs.push(SkipSpec::count(SkipMode::Block, 0));
    }
    let scoring = match args.score_norm.or(file.score_norm).as_deref() {
        None | Some("raw") => ChoiceScoring::RawSum,
        Some("per-token") => ChoiceScoring::PerToken,
        Some(other) => {
            return Err(Error::Config(format!(
                "score-norm must be `raw` or `per-token`, got `{other}`"
            )))
        }
    };
    let task_paths = if args.tasks.is_empty() {
        file.tasks.clone().unwrap_or_default()
    } else {
        args.tasks.clone()
    };
    let mut tasks = Vec::with_capacity(task_paths.len());
    for path in &task_paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("task")
            .to_string();
        tasks.push((name, McTask::load(path)?));
    }
    let corpus = args.corpus.or(file.corpus).map(load_corpus).transpose()?;
    let report = eval_sweep(&weights, &specs, &tasks, corpus.as_deref(), scoring)?;
    let format = parse_format(args.format, file.format)?;
    let content = match format {
        Format::Table => report.render_table(),
        Format::Csv => report.to_csv(),
    };
    write_or_print(args.out.or(file.out).as_deref(), &content)
}
