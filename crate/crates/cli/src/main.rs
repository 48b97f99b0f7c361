use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use neardup::analysis::Alternative;
use neardup::kappa::Rule;
use neardup::lm::EmbeddingSide;
use neardup::vocab::{Marker, VocabFormat};
use neardup_cli::commands::{self as cmd, AnalyzeOp, Ctx, GroupingKind, Recipe, TransformOp, VerificationFailed};
use neardup_cli::config::effective;

#[derive(Parser)]
#[command(
    name = "neardup",
    version,
    about = "Near-duplicate subword analysis and duplication experiments"
)]
struct Cli {
    /// Worker threads for parallel stages (default: NEARDUP_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute even when outputs carry the same config hash.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Near-duplicate rates per rule.
    AnalyzeVocab(AnalyzeVocabArgs),
    /// Build and save a deduplication map.
    BuildKappa(BuildKappaArgs),
    /// Train or apply a BPE tokenizer on a corpus.
    Tokenize(TokenizeArgs),
    /// Duplicate, deduplicate or flag a token stream.
    Transform(TransformArgs),
    /// Train a language model.
    Train(TrainArgs),
    /// Sliding-window evaluation with projected perplexity.
    Eval(EvalArgs),
    /// Similarity, surprisal deltas, power-law fits and t-tests.
    Analyze(AnalyzeArgs),
    /// Check the entropy identities on bundled and random distributions.
    VerifyTheory(VerifyTheoryArgs),
    /// Run a named end-to-end recipe.
    Repro(ReproArgs),
}

#[derive(Args, Serialize, Default)]
struct VocabArgs {
    /// Vocabulary file.
    #[arg(long = "vocab")]
    path: Option<PathBuf>,
    #[arg(long)]
    format: Option<VocabFormat>,
    #[arg(long)]
    marker: Option<Marker>,
    #[arg(long)]
    eos: Option<String>,
}

#[derive(Args, Serialize)]
struct AnalyzeVocabArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    /// Comma-separated rules; `all` is the composed rule.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    rules: Option<Vec<Rule>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    #[serde(skip)]
    json: bool,
}

#[derive(Args, Serialize)]
struct BuildKappaArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    rule: Option<Rule>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TokenizeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus (`.jsonl` with a `text` field, or a plain text file).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    test_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TransformArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    op: Option<TransformOp>,
    #[arg(long)]
    stream: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    choice_p: Option<f64>,
    #[arg(long)]
    scheme_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    rule: Option<Rule>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Default)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context_length: Option<usize>,
    #[arg(long)]
    tied_embeddings: Option<bool>,
    #[arg(long)]
    noncanonical_embedding_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Default)]
struct ScheduleArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    final_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    stream: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    flags: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    stream: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    rule: Option<Rule>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    flags: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (n, p) = s.split_once(':').ok_or_else(|| format!("expected n:ppl, got {s:?}"))?;
    Ok((
        n.trim().parse().map_err(|e| format!("{n:?}: {e}"))?,
        p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?,
    ))
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    op: Option<AnalyzeOp>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    rule: Option<Rule>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    side: Option<EmbeddingSide>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    counts_stream: Option<PathBuf>,
    #[arg(long)]
    records_a: Option<PathBuf>,
    #[arg(long)]
    records_b: Option<PathBuf>,
    #[arg(long)]
    grouping: Option<GroupingKind>,
    #[arg(long)]
    local: Option<bool>,
    #[arg(long)]
    min_support: Option<usize>,
    /// Comma-separated `n:ppl` points.
    #[arg(long, value_delimiter = ',', value_parser = parse_point)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<(f64, f64)>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_point)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points_b: Option<Vec<(f64, f64)>>,
    #[arg(long)]
    invert_at: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_alternative)]
    alternative: Option<Alternative>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_alternative(s: &str) -> Result<Alternative, String> {
    match s {
        "two-sided" | "two" => Ok(Alternative::TwoSided),
        "less" => Ok(Alternative::Less),
        "greater" => Ok(Alternative::Greater),
        other => Err(format!("unknown alternative {other:?} (two-sided, less, greater)")),
    }
}

#[derive(Args, Serialize)]
struct VerifyTheoryArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Number of extra seeded random cases.
    #[arg(long)]
    random: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReproArgs {
    #[arg(value_enum)]
    #[serde(skip)]
    recipe: Recipe,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    vocab_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| std::env::var("NEARDUP_THREADS").ok().and_then(|s| s.parse().ok()));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        force: cli.force,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::AnalyzeVocab(a) => {
            let cfg: cmd::AnalyzeVocabConfig = effective(a.config.as_deref(), &a)?;
            let report = cmd::analyze_vocab(&ctx, &cfg)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::BuildKappa(a) => {
            let cfg: cmd::BuildKappaConfig = effective(a.config.as_deref(), &a)?;
            cmd::build_kappa_cmd(&ctx, &cfg)?;
        }
        Command::Tokenize(a) => {
            let cfg: cmd::TokenizeConfig = effective(a.config.as_deref(), &a)?;
            cmd::tokenize(&ctx, &cfg)?;
        }
        Command::Transform(a) => {
            let cfg: cmd::TransformConfig = effective(a.config.as_deref(), &a)?;
            cmd::transform(&ctx, &cfg)?;
        }
        Command::Train(a) => {
            let cfg: cmd::TrainConfig = effective(a.config.as_deref(), &a)?;
            cmd::train_cmd(&ctx, &cfg)?;
        }
        Command::Eval(a) => {
            let cfg: cmd::EvalConfig = effective(a.config.as_deref(), &a)?;
            cmd::eval_cmd(&ctx, &cfg)?;
        }
        Command::Analyze(a) => {
            let cfg: cmd::AnalyzeConfig = effective(a.config.as_deref(), &a)?;
            let v = cmd::analyze(&ctx, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::VerifyTheory(a) => {
            let cfg: cmd::VerifyTheoryConfig = effective(a.config.as_deref(), &a)?;
            cmd::verify_theory(&ctx, &cfg)?;
        }
        Command::Repro(a) => {
            let cfg: cmd::ReproConfig = effective(a.config.as_deref(), &a)?;
            cmd::repro(&ctx, a.recipe, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
