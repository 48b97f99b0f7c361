//! Desk-scale duplication experiments: BPE on a document corpus, synthetic
//! duplication of the trained vocabulary, training and projected evaluation.
//! Each (condition, seed) run is cached by a hash of everything it depends on.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neardup::analysis::{welch_t_test, Alternative, TTest};
use neardup::corpus::{duplicate_sample_stream, train_bpe, BpeTokenizer, TokenStream};
use neardup::eval::{plain_ppl, projected_ppl, sliding_window_surprisals, tags_for_scheme, EvalOptions};
use neardup::kappa::{build_synthetic_dup, DedupMap, DupScheme};
use neardup::lm::{train, Checkpoint, LmConfig, TrainSchedule};

use crate::corpus_io::{read_documents, split_documents};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    /// Corpus file (`.jsonl` with a `text` field per document).
    pub corpus: PathBuf,
    pub vocab_size: usize,
    /// Every n-th document is held out for evaluation.
    pub test_every: usize,
    /// Training tokens of the full-data condition.
    pub train_tokens: usize,
    pub test_tokens: usize,
    pub seeds: Vec<u64>,
    pub model: LmConfig,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub eval_window: usize,
    pub choice_p: f64,
    /// Seed for sampling twins in the test stream.
    pub eval_seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let mut model = LmConfig::desk(2000);
        model.context_length = 128;
        Self {
            corpus: PathBuf::from("data/corpus/sotu.jsonl"),
            vocab_size: 2000,
            test_every: 20,
            train_tokens: 1_000_000,
            test_tokens: 50_000,
            seeds: vec![0, 1, 2],
            model,
            batch_size: 8,
            peak_lr: 2e-3,
            final_lr: 2e-5,
            warmup_fraction: 0.1,
            eval_window: 128,
            choice_p: 0.5,
            eval_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// Share of base symbols given a twin.
    pub dup_fraction: f64,
    /// Share of the full-data token budget used for training.
    pub data_fraction: f64,
}

impl Condition {
    pub fn new(name: &str, dup_fraction: f64, data_fraction: f64) -> Self {
        Self {
            name: name.to_string(),
            dup_fraction,
            data_fraction,
        }
    }

    pub fn dedup_full() -> Self {
        Self::new("dedup-full", 0.0, 1.0)
    }

    pub fn dedup_half() -> Self {
        Self::new("dedup-50%", 0.0, 0.5)
    }

    pub fn duplicated_full() -> Self {
        Self::new("duplicated-full", 1.0, 1.0)
    }

    pub fn duplicated_fraction(f: f64) -> Self {
        Self::new(&format!("dup-fraction-{f}"), f, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: Condition,
    pub seed: u64,
    pub projected_ppl: f64,
    pub plain_ppl: f64,
    pub train_tokens: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Tokenized train and test splits shared by all runs of one config.
pub struct Prepared {
    pub tokenizer: BpeTokenizer,
    pub train: TokenStream,
    pub test: TokenStream,
    pub corpus_hash: String,
}

impl Prepared {
    pub fn base_vocab(&self) -> &Arc<neardup::Vocabulary> {
        self.tokenizer.vocab()
    }

    /// Training stream of one condition, before duplication.
    pub fn train_prefix(&self, cfg: &DeskConfig, cond: &Condition) -> TokenStream {
        let budget = (cfg.train_tokens as f64 * cond.data_fraction).round() as usize;
        self.train.prefix_documents(budget)
    }
}

pub fn prepare(cfg: &DeskConfig) -> Result<Prepared> {
    let bytes = std::fs::read(&cfg.corpus).with_context(|| format!("reading {}", cfg.corpus.display()))?;
    let corpus_hash = hex(&Sha256::digest(&bytes));
    let docs = read_documents(&cfg.corpus)?;
    let (train_docs, test_docs) = split_documents(docs, cfg.test_every);
    anyhow::ensure!(!test_docs.is_empty(), "no test documents; lower test_every");
    let tokenizer = train_bpe(&train_docs, cfg.vocab_size)?;
    let train = tokenizer.encode(&train_docs);
    let test = tokenizer.encode(&test_docs);
    let test = truncate(&test, cfg.test_tokens, tokenizer.vocab())?;
    Ok(Prepared {
        tokenizer,
        train,
        test,
        corpus_hash,
    })
}

/// The first `n` tokens of a stream, the last of them forced to eos.
fn truncate(stream: &TokenStream, n: usize, vocab: &neardup::Vocabulary) -> Result<TokenStream> {
    let n = n.clamp(1, stream.len());
    let mut ids = stream.ids()[..n].to_vec();
    ids[n - 1] = vocab.eos_id();
    Ok(TokenStream::from_ids(ids, vocab)?)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a single run depends on.
#[derive(Serialize)]
struct RunKey<'a> {
    version: &'a str,
    corpus_hash: &'a str,
    cfg: &'a DeskConfig,
    condition: &'a Condition,
    seed: u64,
}

pub fn run_key(cfg: &DeskConfig, prep: &Prepared, cond: &Condition, seed: u64) -> String {
    let mut cfg = cfg.clone();
    cfg.seeds.clear();
    cfg.corpus = PathBuf::new();
    let key = RunKey {
        version: neardup::VERSION,
        corpus_hash: &prep.corpus_hash,
        cfg: &cfg,
        condition: cond,
        seed,
    };
    let json = serde_json::to_vec(&key).expect("key serializes");
    hex(&Sha256::digest(&json))[..16].to_string()
}

/// Files kept for a finished run.
pub struct RunArtifacts {
    pub result: RunResult,
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::load(&self.dir.join("model.ckpt"))?)
    }

    /// The duplication scheme, for duplicated conditions.
    pub fn scheme(&self, prep: &Prepared) -> Result<Option<DupScheme>> {
        let path = self.dir.join("scheme.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(DupScheme::from_json(&text, prep.base_vocab().clone())?))
    }
}

/// Trains and evaluates one run, or loads it from `cache_dir`.
pub fn run(
    cfg: &DeskConfig,
    prep: &Prepared,
    cond: &Condition,
    seed: u64,
    cache_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<RunArtifacts> {
    let dir = cache_dir.join(format!(
        "{}-s{}-{}",
        sanitize(&cond.name),
        seed,
        run_key(cfg, prep, cond, seed)
    ));
    let result_path = dir.join("result.json");
    if let Ok(text) = std::fs::read_to_string(&result_path) {
        if let Ok(result) = serde_json::from_str::<RunResult>(&text) {
            if dir.join("model.ckpt").exists() {
                log(&format!("{} seed {}: cached ({})", cond.name, seed, dir.display()));
                return Ok(RunArtifacts { result, dir });
            }
        }
    }
    let start = Instant::now();
    let base = prep.base_vocab().clone();
    let train_base = prep.train_prefix(cfg, cond);
    let (train_stream, test_stream, map, scheme) = if cond.dup_fraction > 0.0 {
        let (scheme, map) = build_synthetic_dup(base, cond.dup_fraction, cfg.choice_p, seed)?;
        let tr = duplicate_sample_stream(&train_base, &scheme, seed.wrapping_add(0x5eed))?;
        let te = duplicate_sample_stream(&prep.test, &scheme, cfg.eval_seed)?;
        (tr, te, map, Some(scheme))
    } else {
        (train_base, prep.test.clone(), DedupMap::identity(base), None)
    };
    let mut model = cfg.model.clone();
    model.vocab_size = train_stream.vocab_len();
    model.seed = seed;
    let t = model.context_length;
    let sequences = (train_stream.len().saturating_sub(1)) / t;
    let steps = (sequences / cfg.batch_size).max(1);
    let schedule = TrainSchedule {
        batch_size: cfg.batch_size,
        steps,
        peak_lr: cfg.peak_lr,
        final_lr: cfg.final_lr,
        warmup_steps: ((steps as f64 * cfg.warmup_fraction).round() as usize).min(steps),
        log_every: (steps / 20).max(1),
        data_seed: seed,
        ..Default::default()
    };
    log(&format!(
        "{} seed {}: training on {} tokens, {} steps",
        cond.name,
        seed,
        train_stream.len(),
        steps
    ));
    let ckpt = train(&model, &schedule, &train_stream, None)?;
    let mut opts = EvalOptions::for_context(cfg.eval_window);
    opts.tags = scheme.as_ref().map(tags_for_scheme);
    let records = sliding_window_surprisals(&ckpt.model, &test_stream, &map, None, &opts)?;
    let result = RunResult {
        condition: cond.clone(),
        seed,
        projected_ppl: projected_ppl(&records)?,
        plain_ppl: plain_ppl(&records)?,
        train_tokens: train_stream.len(),
        steps,
        final_loss: ckpt.loss_curve.last().map(|s| s.loss).unwrap_or(f64::NAN),
        seconds: start.elapsed().as_secs_f64(),
    };
    log(&format!(
        "{} seed {}: PPL_k {:.3} ({:.0}s)",
        cond.name, seed, result.projected_ppl, result.seconds
    ));

    let tmp = dir.with_extension("partial");
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp)?;
    ckpt.save(&tmp.join("model.ckpt"))?;
    std::fs::write(tmp.join("loss.csv"), ckpt.loss_curve_csv())?;
    if let Some(s) = &scheme {
        std::fs::write(tmp.join("scheme.json"), s.to_json())?;
    }
    std::fs::write(tmp.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::rename(&tmp, &dir)?;
    Ok(RunArtifacts { result, dir })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub ppl: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(cond: &Condition, runs: &[RunResult]) -> ConditionSummary {
    let ppl: Vec<f64> = runs.iter().map(|r| r.projected_ppl).collect();
    let n = ppl.len() as f64;
    let mean = ppl.iter().sum::<f64>() / n;
    let std = if ppl.len() > 1 {
        (ppl.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    ConditionSummary {
        condition: cond.clone(),
        ppl,
        mean,
        std,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2 {
    pub rows: Vec<ConditionSummary>,
    /// dedup-full < duplicated-full, one-sided.
    pub dedup_vs_duplicated: Option<TTest>,
}

impl Table2 {
    pub fn row(&self, name: &str) -> Option<&ConditionSummary> {
        self.rows.iter().find(|r| r.condition.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<18} {:>10} {:>8}  per-seed\n", "condition", "PPL_k", "std");
        for r in &self.rows {
            let seeds: Vec<String> = r.ppl.iter().map(|p| format!("{p:.3}")).collect();
            s.push_str(&format!(
                "{:<18} {:>10.3} {:>8.3}  {}\n",
                r.condition.name,
                r.mean,
                r.std,
                seeds.join(" ")
            ));
        }
        if let Some(t) = &self.dedup_vs_duplicated {
            s.push_str(&format!(
                "welch dedup-full < duplicated-full: t = {:.3}, df = {:.2}, p = {:.4}\n",
                t.t, t.df, t.p
            ));
        }
        s
    }
}

/// Runs every condition over all seeds.
pub fn run_conditions(
    cfg: &DeskConfig,
    prep: &Prepared,
    conditions: &[Condition],
    cache_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<(ConditionSummary, Vec<RunArtifacts>)>> {
    let mut out = Vec::new();
    for cond in conditions {
        let mut arts = Vec::new();
        for &seed in &cfg.seeds {
            arts.push(run(cfg, prep, cond, seed, cache_dir, log)?);
        }
        let results: Vec<RunResult> = arts.iter().map(|a| a.result.clone()).collect();
        out.push((summarize(cond, &results), arts));
    }
    Ok(out)
}

pub fn table2(cfg: &DeskConfig, prep: &Prepared, cache_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Table2> {
    let conds = [
        Condition::dedup_full(),
        Condition::duplicated_full(),
        Condition::dedup_half(),
    ];
    let rows: Vec<ConditionSummary> = run_conditions(cfg, prep, &conds, cache_dir, log)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let test = welch_t_test(&rows[0].ppl, &rows[1].ppl, Alternative::Less).ok();
    Ok(Table2 {
        rows,
        dedup_vs_duplicated: test,
    })
}

/// Mean PPL_k per duplication fraction.
pub fn fraction_sweep(
    cfg: &DeskConfig,
    prep: &Prepared,
    fractions: &[f64],
    cache_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<ConditionSummary>> {
    let conds: Vec<Condition> = fractions
        .iter()
        .map(|&f| {
            if f == 0.0 {
                Condition::dedup_full()
            } else if f == 1.0 {
                Condition::duplicated_full()
            } else {
                Condition::duplicated_fraction(f)
            }
        })
        .collect();
    Ok(run_conditions(cfg, prep, &conds, cache_dir, log)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}
