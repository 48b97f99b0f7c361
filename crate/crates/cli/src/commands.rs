//! Subcommand implementations. Each command merges its defaults, an optional
//! JSON config and explicit flags into one effective config, hashes it
//! together with its input files, and skips work when the outputs already
//! carry that hash.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neardup::analysis::{
    bin_by_frequency, duplicate_pair_similarity, equal_performance_ratio, fit_power_law, quartile_means,
    surprisal_delta, welch_t_test, Alternative, BinPolicy, Grouping,
};
use neardup::corpus::{
    apply_kappa_stream, duplicate_sample_stream, noncanonical_flag_stream, train_bpe, BpeTokenizer, FlagStream,
    TokenStream,
};
use neardup::eval::{
    plain_ppl, projected_ppl, read_records, sliding_window_surprisals, tags_for_scheme, write_records, EvalOptions,
};
use neardup::kappa::{build_kappa, build_synthetic_dup, DedupMap, DupScheme, Rule};
use neardup::lm::{train_with, Checkpoint, EmbeddingSide, LmConfig, TrainSchedule};
use neardup::theory::{bundled_cases, check_case, random_case, CaseTolerance};
use neardup::vocab::{LoadOptions, Marker, VocabFormat, Vocabulary};

use crate::config::config_hash;
use crate::corpus_io::{read_documents, split_documents};
use crate::desk::{self, hex, DeskConfig};
use crate::outputs::{Meta, Outputs};

/// A failed verification, reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("verification failed: {0}")]
pub struct VerificationFailed(pub String);

/// Where and how to read a vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSpec {
    pub path: Option<PathBuf>,
    /// Inferred from the extension when absent.
    pub format: Option<VocabFormat>,
    pub marker: Option<Marker>,
    pub eos: Option<String>,
}

impl VocabSpec {
    pub fn load(&self) -> Result<Arc<Vocabulary>> {
        let path = self.path.as_ref().context("no vocabulary given (--vocab)")?;
        let format = self.format.unwrap_or_else(|| infer_format(path));
        let opts = LoadOptions {
            marker: self.marker,
            eos: self.eos.clone(),
            append_eos: false,
        };
        let v = Vocabulary::load(path, format, &opts).with_context(|| format!("loading {}", path.display()))?;
        Ok(Arc::new(v))
    }
}

pub fn infer_format(path: &Path) -> VocabFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => VocabFormat::JsonMap,
        Some("tsv") => VocabFormat::SentencepieceTsv,
        _ => VocabFormat::PlainLines,
    }
}

/// Base vocabulary plus the optional duplication scheme built on it.
pub struct Vocabs {
    pub base: Arc<Vocabulary>,
    pub scheme: Option<DupScheme>,
}

impl Vocabs {
    pub fn load(spec: &VocabSpec, scheme: Option<&Path>) -> Result<Self> {
        let base = spec.load()?;
        let scheme = match scheme {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Some(DupScheme::from_json(&text, base.clone())?)
            }
            None => None,
        };
        Ok(Self { base, scheme })
    }

    /// The vocabulary streams and models are expressed in.
    pub fn active(&self) -> Arc<Vocabulary> {
        match &self.scheme {
            Some(s) => s.dup_vocab().clone(),
            None => self.base.clone(),
        }
    }

    /// Map from the active vocabulary to canonical symbols: the scheme's
    /// twins, else a rule, else a map file, else the identity.
    pub fn eval_map(&self, rule: Option<Rule>, map: Option<&Path>) -> Result<DedupMap> {
        if let Some(s) = &self.scheme {
            return Ok(s.dedup_map());
        }
        if let Some(p) = map {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return Ok(DedupMap::from_json(&text, self.base.clone())?);
        }
        Ok(match rule {
            Some(r) => build_kappa(self.base.clone(), r),
            None => DedupMap::identity(self.base.clone()),
        })
    }
}

/// Hash of a config together with the bytes of its input files.
pub fn fingerprint<T: Serialize>(cfg: &T, inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(config_hash(cfg)?.as_bytes());
    for p in inputs {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex(&h.finalize()))
}

/// Shared run context.
pub struct Ctx {
    pub force: bool,
    pub quiet: bool,
}

impl Ctx {
    pub fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn begin<T: Serialize>(
    ctx: &Ctx,
    command: &str,
    out: &Path,
    cfg: &T,
    inputs: &[&Path],
    expected: &[&str],
) -> Result<Option<Outputs>> {
    let hash = fingerprint(cfg, inputs)?;
    let mut o = Outputs::begin(out, Meta::new(command, &hash))?;
    if !ctx.force && o.up_to_date(expected) {
        ctx.note(&format!(
            "{command}: outputs in {} are up to date (config {})",
            out.display(),
            &hash[..12]
        ));
        return Ok(None);
    }
    o.set_effective_config(cfg)?;
    Ok(Some(o))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing {flag}"))
}

// ---------------------------------------------------------------- analyze-vocab

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeVocabConfig {
    pub vocab: VocabSpec,
    pub rules: Vec<Rule>,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeVocabConfig {
    fn default() -> Self {
        Self {
            vocab: VocabSpec::default(),
            rules: Rule::NATURAL.to_vec(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRate {
    pub rule: Rule,
    pub rate: f64,
    pub source_size: usize,
    pub canonical_size: usize,
    /// Groups with more than one member.
    pub merged_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabReport {
    pub vocab_size: usize,
    pub rates: Vec<RuleRate>,
}

impl VocabReport {
    pub fn rate(&self, rule: Rule) -> Option<f64> {
        self.rates.iter().find(|r| r.rule == rule).map(|r| r.rate)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<8} {:>8} {:>10} {:>10} {:>8}\n",
            "rule", "rate", "|V|", "|V_bar|", "merged"
        );
        for r in &self.rates {
            s.push_str(&format!(
                "{:<8} {:>7.2}% {:>10} {:>10} {:>8}\n",
                r.rule.name(),
                100.0 * r.rate,
                r.source_size,
                r.canonical_size,
                r.merged_groups
            ));
        }
        s
    }
}

pub fn vocab_report(vocab: &Arc<Vocabulary>, rules: &[Rule]) -> VocabReport {
    let rates = rules
        .iter()
        .map(|&rule| {
            let map = build_kappa(vocab.clone(), rule);
            let (canonical, source) = map.rate_terms();
            RuleRate {
                rule,
                rate: map.near_duplicate_rate(),
                source_size: source,
                canonical_size: canonical,
                merged_groups: map.groups().iter().filter(|g| g.len() > 1).count(),
            }
        })
        .collect();
    VocabReport {
        vocab_size: vocab.len(),
        rates,
    }
}

pub fn analyze_vocab(ctx: &Ctx, cfg: &AnalyzeVocabConfig) -> Result<VocabReport> {
    let vocab = cfg.vocab.load()?;
    let report = vocab_report(&vocab, &cfg.rules);
    if let Some(out) = &cfg.out {
        let path = require(&cfg.vocab.path, "--vocab")?;
        if let Some(mut o) = begin(ctx, "analyze-vocab", out, cfg, &[path], &["rates.json"])? {
            write_json(&o.file("rates.json"), &report)?;
            o.commit()?;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- build-kappa

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildKappaConfig {
    pub vocab: VocabSpec,
    pub rule: Rule,
    pub out: Option<PathBuf>,
}

impl Default for BuildKappaConfig {
    fn default() -> Self {
        Self {
            vocab: VocabSpec::default(),
            rule: Rule::All,
            out: None,
        }
    }
}

pub fn build_kappa_cmd(ctx: &Ctx, cfg: &BuildKappaConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let path = require(&cfg.vocab.path, "--vocab")?;
    let Some(mut o) = begin(ctx, "build-kappa", out, cfg, &[path], &["kappa.json", "canonical.json"])? else {
        return Ok(());
    };
    let vocab = cfg.vocab.load()?;
    let map = build_kappa(vocab, cfg.rule);
    std::fs::write(o.file("kappa.json"), map.to_json())?;
    map.canonical_vocab()?
        .save(o.file("canonical.json"), VocabFormat::JsonMap)?;
    ctx.note(&format!(
        "{}: {} -> {} symbols (rate {:.2}%)",
        cfg.rule,
        map.source_len(),
        map.canonical_len(),
        100.0 * map.near_duplicate_rate()
    ));
    o.commit()
}

// ---------------------------------------------------------------- tokenize

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizeConfig {
    pub input: Option<PathBuf>,
    /// Train a new tokenizer of this size.
    pub vocab_size: Option<usize>,
    /// Or apply an existing one.
    pub vocab: VocabSpec,
    pub merges: Option<PathBuf>,
    /// Every n-th document goes to `test.toks`; 0 writes `corpus.toks` only.
    pub test_every: usize,
    pub out: Option<PathBuf>,
}

pub fn tokenize(ctx: &Ctx, cfg: &TokenizeConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let input = require(&cfg.input, "--input")?;
    let mut inputs = vec![input];
    if let Some(p) = &cfg.vocab.path {
        inputs.push(p);
    }
    if let Some(p) = &cfg.merges {
        inputs.push(p);
    }
    let streams: &[&str] = if cfg.test_every > 0 {
        &["vocab.json", "merges.tsv", "train.toks", "test.toks"]
    } else {
        &["vocab.json", "merges.tsv", "corpus.toks"]
    };
    let Some(mut o) = begin(ctx, "tokenize", out, cfg, &inputs, streams)? else {
        return Ok(());
    };
    let docs = read_documents(input)?;
    let (train_docs, test_docs) = split_documents(docs, cfg.test_every);
    let tok = match (cfg.vocab_size, &cfg.vocab.path) {
        (Some(n), None) => train_bpe(&train_docs, n)?,
        (None, Some(_)) => {
            let merges = BpeTokenizer::load_merges(require(&cfg.merges, "--merges")?)?;
            BpeTokenizer::from_parts(cfg.vocab.load()?, merges)?
        }
        _ => bail!("give exactly one of --vocab-size or --vocab/--merges"),
    };
    tok.vocab().save(o.file("vocab.json"), VocabFormat::JsonMap)?;
    tok.save_merges(&o.file("merges.tsv"))?;
    if cfg.test_every > 0 {
        let tr = tok.encode(&train_docs);
        let te = tok.encode(&test_docs);
        tr.save(&o.file("train.toks"))?;
        te.save(&o.file("test.toks"))?;
        ctx.note(&format!("{} train and {} test tokens", tr.len(), te.len()));
    } else {
        let s = tok.encode(&train_docs);
        s.save(&o.file("corpus.toks"))?;
        ctx.note(&format!("{} tokens", s.len()));
    }
    o.commit()
}

// ---------------------------------------------------------------- transform

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TransformOp {
    Duplicate,
    Dedup,
    Flags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub op: TransformOp,
    pub stream: Option<PathBuf>,
    pub vocab: VocabSpec,
    /// Duplication scheme the input stream is expressed in (dedup only).
    pub scheme: Option<PathBuf>,
    pub fraction: f64,
    pub choice_p: f64,
    pub scheme_seed: u64,
    pub sample_seed: u64,
    pub rule: Rule,
    pub out: Option<PathBuf>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            op: TransformOp::Duplicate,
            stream: None,
            vocab: VocabSpec::default(),
            scheme: None,
            fraction: 1.0,
            choice_p: 0.5,
            scheme_seed: 0,
            sample_seed: 0,
            rule: Rule::All,
            out: None,
        }
    }
}

pub fn transform(ctx: &Ctx, cfg: &TransformConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let stream_path = require(&cfg.stream, "--stream")?;
    let mut inputs = vec![stream_path, require(&cfg.vocab.path, "--vocab")?];
    if let Some(p) = &cfg.scheme {
        inputs.push(p);
    }
    let expected: &[&str] = match cfg.op {
        TransformOp::Duplicate => &["scheme.json", "vocab.json", "stream.toks"],
        TransformOp::Dedup => &["kappa.json", "vocab.json", "stream.toks"],
        TransformOp::Flags => &["stream.flags"],
    };
    let Some(mut o) = begin(ctx, "transform", out, cfg, &inputs, expected)? else {
        return Ok(());
    };
    let vocabs = Vocabs::load(&cfg.vocab, cfg.scheme.as_deref())?;
    let stream = TokenStream::load(stream_path)?;
    stream.check_vocab(&vocabs.active())?;
    match cfg.op {
        TransformOp::Duplicate => {
            if vocabs.scheme.is_some() {
                bail!("duplicate expects a base-vocabulary stream; drop --scheme");
            }
            let (scheme, _) = build_synthetic_dup(vocabs.base.clone(), cfg.fraction, cfg.choice_p, cfg.scheme_seed)?;
            let dup = duplicate_sample_stream(&stream, &scheme, cfg.sample_seed)?;
            std::fs::write(o.file("scheme.json"), scheme.to_json())?;
            scheme.dup_vocab().save(o.file("vocab.json"), VocabFormat::JsonMap)?;
            dup.save(&o.file("stream.toks"))?;
            ctx.note(&format!(
                "duplicated {} of {} symbols",
                scheme.duplicated_count(),
                vocabs.base.len()
            ));
        }
        TransformOp::Dedup => {
            let map = vocabs.eval_map(Some(cfg.rule), None)?;
            let canon = apply_kappa_stream(&stream, &map)?;
            std::fs::write(o.file("kappa.json"), map.to_json())?;
            map.canonical_vocab()?
                .save(o.file("vocab.json"), VocabFormat::JsonMap)?;
            canon.save(&o.file("stream.toks"))?;
        }
        TransformOp::Flags => {
            let map = build_kappa(vocabs.active(), cfg.rule);
            let flags = noncanonical_flag_stream(&stream, &map)?;
            flags.save(&o.file("stream.flags"))?;
            ctx.note(&format!(
                "{:.2}% of positions flagged",
                100.0 * flags.flagged_fraction()
            ));
        }
    }
    o.commit()
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stream: Option<PathBuf>,
    pub vocab: VocabSpec,
    pub scheme: Option<PathBuf>,
    pub flags: Option<PathBuf>,
    pub model: LmConfig,
    pub schedule: TrainSchedule,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stream: None,
            vocab: VocabSpec::default(),
            scheme: None,
            flags: None,
            model: LmConfig::desk(0),
            schedule: TrainSchedule::default(),
            out: None,
        }
    }
}

pub fn train_cmd(ctx: &Ctx, cfg: &TrainConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let stream_path = require(&cfg.stream, "--stream")?;
    let mut inputs = vec![stream_path, require(&cfg.vocab.path, "--vocab")?];
    inputs.extend(cfg.scheme.as_deref());
    inputs.extend(cfg.flags.as_deref());
    let Some(mut o) = begin(ctx, "train", out, cfg, &inputs, &["model.ckpt", "loss.csv"])? else {
        return Ok(());
    };
    let vocabs = Vocabs::load(&cfg.vocab, cfg.scheme.as_deref())?;
    let stream = TokenStream::load(stream_path)?;
    stream.check_vocab(&vocabs.active())?;
    let flags = cfg.flags.as_deref().map(FlagStream::load).transpose()?;
    let mut model = cfg.model.clone();
    model.vocab_size = stream.vocab_len();
    let ckpt = train_with(&model, &cfg.schedule, &stream, flags.as_ref(), |s| {
        ctx.note(&format!("step {:>6}  lr {:.3e}  loss {:.4}", s.step, s.lr, s.loss));
    })?;
    ckpt.save(&o.file("model.ckpt"))?;
    std::fs::write(o.file("loss.csv"), ckpt.loss_curve_csv())?;
    o.commit()
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub stream: Option<PathBuf>,
    pub vocab: VocabSpec,
    pub scheme: Option<PathBuf>,
    pub rule: Option<Rule>,
    pub map: Option<PathBuf>,
    pub flags: Option<PathBuf>,
    /// Defaults to the model context.
    pub window: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub projected_ppl: f64,
    pub plain_ppl: f64,
    pub positions: usize,
}

pub fn eval_cmd(ctx: &Ctx, cfg: &EvalConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let ckpt_path = require(&cfg.checkpoint, "--checkpoint")?;
    let stream_path = require(&cfg.stream, "--stream")?;
    let mut inputs = vec![ckpt_path, stream_path, require(&cfg.vocab.path, "--vocab")?];
    inputs.extend(cfg.scheme.as_deref());
    inputs.extend(cfg.map.as_deref());
    inputs.extend(cfg.flags.as_deref());
    let Some(mut o) = begin(ctx, "eval", out, cfg, &inputs, &["records.csv", "summary.json"])? else {
        return Ok(());
    };
    let vocabs = Vocabs::load(&cfg.vocab, cfg.scheme.as_deref())?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let stream = TokenStream::load(stream_path)?;
    let flags = cfg.flags.as_deref().map(FlagStream::load).transpose()?;
    let map = vocabs.eval_map(cfg.rule, cfg.map.as_deref())?;
    let mut opts = EvalOptions::for_context(cfg.window.unwrap_or(ckpt.model.config().context_length));
    opts.tags = vocabs.scheme.as_ref().map(tags_for_scheme);
    let records = sliding_window_surprisals(&ckpt.model, &stream, &map, flags.as_ref(), &opts)?;
    let summary = EvalSummary {
        projected_ppl: projected_ppl(&records)?,
        plain_ppl: plain_ppl(&records)?,
        positions: records.len(),
    };
    let f = std::fs::File::create(o.file("records.csv"))?;
    write_records(std::io::BufWriter::new(f), &records)?;
    write_json(&o.file("summary.json"), &summary)?;
    ctx.note(&format!(
        "projected PPL {:.4}, plain PPL {:.4} over {} positions",
        summary.projected_ppl, summary.plain_ppl, summary.positions
    ));
    o.commit()
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeOp {
    Similarity,
    Delta,
    Fit,
    Ttest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingKind {
    TreatmentControl,
    FrequencyBin,
    ContextFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub op: AnalyzeOp,
    // similarity
    pub checkpoint: Option<PathBuf>,
    pub vocab: VocabSpec,
    pub scheme: Option<PathBuf>,
    pub rule: Option<Rule>,
    pub map: Option<PathBuf>,
    pub side: EmbeddingSide,
    pub seed: u64,
    /// Stream over the canonical (base) vocabulary used for frequencies.
    pub counts_stream: Option<PathBuf>,
    pub bin_policy: BinPolicy,
    // delta
    pub records_a: Option<PathBuf>,
    pub records_b: Option<PathBuf>,
    pub grouping: GroupingKind,
    pub local: bool,
    pub min_support: usize,
    // fit
    pub points: Vec<(f64, f64)>,
    pub points_b: Vec<(f64, f64)>,
    pub invert_at: Option<f64>,
    // ttest
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub alternative: Alternative,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            op: AnalyzeOp::Ttest,
            checkpoint: None,
            vocab: VocabSpec::default(),
            scheme: None,
            rule: None,
            map: None,
            side: EmbeddingSide::Input,
            seed: 0,
            counts_stream: None,
            bin_policy: BinPolicy::default(),
            records_a: None,
            records_b: None,
            grouping: GroupingKind::TreatmentControl,
            local: false,
            min_support: 1000,
            points: Vec::new(),
            points_b: Vec::new(),
            invert_at: None,
            a: Vec::new(),
            b: Vec::new(),
            alternative: Alternative::TwoSided,
            out: None,
        }
    }
}

/// Occurrences of each id in a stream.
pub fn id_counts(stream: &TokenStream) -> Vec<u64> {
    let mut c = vec![0u64; stream.vocab_len()];
    for &id in stream.ids() {
        c[id as usize] += 1;
    }
    c
}

pub fn analyze(ctx: &Ctx, cfg: &AnalyzeConfig) -> Result<serde_json::Value> {
    let mut inputs: Vec<&Path> = Vec::new();
    for p in [
        &cfg.checkpoint,
        &cfg.vocab.path,
        &cfg.scheme,
        &cfg.map,
        &cfg.counts_stream,
        &cfg.records_a,
        &cfg.records_b,
    ]
    .into_iter()
    .flatten()
    {
        inputs.push(p);
    }
    let result = match cfg.op {
        AnalyzeOp::Similarity => similarity(cfg)?,
        AnalyzeOp::Delta => delta(cfg)?,
        AnalyzeOp::Fit => fit(cfg)?,
        AnalyzeOp::Ttest => {
            let t = welch_t_test(&cfg.a, &cfg.b, cfg.alternative)?;
            (serde_json::to_value(t)?, None)
        }
    };
    if let Some(out) = &cfg.out {
        let mut expected = vec!["analysis.json"];
        if result.1.is_some() {
            expected.push("analysis.csv");
        }
        if let Some(mut o) = begin(ctx, "analyze", out, cfg, &inputs, &expected)? {
            write_json(&o.file("analysis.json"), &result.0)?;
            if let Some(csv) = &result.1 {
                std::fs::write(o.file("analysis.csv"), csv)?;
            }
            o.commit()?;
        }
    }
    Ok(result.0)
}

type Analysis = (serde_json::Value, Option<String>);

fn similarity(cfg: &AnalyzeConfig) -> Result<Analysis> {
    let vocabs = Vocabs::load(&cfg.vocab, cfg.scheme.as_deref())?;
    let ckpt = Checkpoint::load(require(&cfg.checkpoint, "--checkpoint")?)?;
    let pairs = match &vocabs.scheme {
        Some(s) => s.twin_pairs(),
        None => vocabs.eval_map(cfg.rule, cfg.map.as_deref())?.duplicate_pairs(),
    };
    let sim = duplicate_pair_similarity(&ckpt.model, &pairs, cfg.side, cfg.seed)?;
    let mut summary = serde_json::json!({
        "pairs": sim.pairs.len(),
        "pair_mean": sim.pair_mean(),
        "baseline_mean": sim.baseline_mean(),
    });
    let mut csv = String::from("a,b,cosine,kind\n");
    for (kind, list) in [("pair", &sim.pairs), ("random", &sim.baseline)] {
        for p in list {
            csv.push_str(&format!("{},{},{},{}\n", p.a, p.b, p.cosine, kind));
        }
    }
    if let Some(path) = &cfg.counts_stream {
        let counts = id_counts(&TokenStream::load(path)?);
        let keyed: Vec<(u32, f64)> = sim.pairs.iter().map(|p| (p.a, p.cosine)).collect();
        let binned = bin_by_frequency(&keyed, &counts, cfg.bin_policy);
        let with_counts: Vec<(f64, u64)> = sim
            .pairs
            .iter()
            .map(|p| (p.cosine, counts.get(p.a as usize).copied().unwrap_or(0)))
            .filter(|&(_, c)| c >= cfg.bin_policy.min_count)
            .collect();
        summary["binned"] = serde_json::to_value(&binned)?;
        summary["quartile_means"] = serde_json::to_value(quartile_means(&with_counts))?;
    }
    Ok((summary, Some(csv)))
}

fn delta(cfg: &AnalyzeConfig) -> Result<Analysis> {
    let read = |p: &Path| -> Result<Vec<neardup::eval::SurprisalRecord>> {
        let f = std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(read_records(std::io::BufReader::new(f))?)
    };
    let a = read(require(&cfg.records_a, "--records-a")?)?;
    let b = read(require(&cfg.records_b, "--records-b")?)?;
    let grouping = match cfg.grouping {
        GroupingKind::TreatmentControl => Grouping::TreatmentControl,
        GroupingKind::FrequencyBin => {
            let path = require(&cfg.counts_stream, "--counts-stream")?;
            Grouping::FrequencyBin {
                counts: id_counts(&TokenStream::load(path)?),
            }
        }
        GroupingKind::ContextFraction => Grouping::ContextFraction {
            bins: 10,
            local: cfg.local,
            min_support: cfg.min_support,
        },
    };
    let report = surprisal_delta(&a, &b, &grouping)?;
    let csv = report.to_csv();
    Ok((serde_json::to_value(report)?, Some(csv)))
}

fn fit(cfg: &AnalyzeConfig) -> Result<Analysis> {
    let fa = fit_power_law(&cfg.points)?;
    let mut v = serde_json::json!({ "fit": fa });
    if let Some(ppl) = cfg.invert_at {
        let n = fa.invert(ppl);
        v["invert_at"] = serde_json::json!({ "ppl": ppl, "n": n });
    }
    let mut csv = None;
    if !cfg.points_b.is_empty() {
        let fb = fit_power_law(&cfg.points_b)?;
        let lo = fa.n_min.min(fb.n_min);
        let hi = fa.n_max.max(fb.n_max);
        let grid: Vec<f64> = (0..=20).map(|k| lo * (hi / lo).powf(k as f64 / 20.0)).collect();
        let curve = equal_performance_ratio(&fa, &fb, &grid);
        let mut s = String::from("n_a,n_b\n");
        for (a, b) in &curve {
            s.push_str(&format!("{a},{b}\n"));
        }
        v["fit_b"] = serde_json::to_value(fb)?;
        csv = Some(s);
    }
    Ok((v, csv))
}

// ---------------------------------------------------------------- verify-theory

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyTheoryConfig {
    /// Extra seeded random cases on top of the bundled ones.
    pub random: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn verify_theory(ctx: &Ctx, cfg: &VerifyTheoryConfig) -> Result<()> {
    let tol = CaseTolerance::default();
    let mut cases = bundled_cases();
    cases.extend((0..cfg.random as u64).map(|k| random_case(cfg.seed.wrapping_add(k))));
    let mut outcomes = Vec::new();
    for case in &cases {
        let out = check_case(case, &tol)?;
        ctx.note(&format!(
            "{:<4} {:<28} MI {:>10.3e}  chain {:>9.1e}  decomposition {:>9.1e}",
            if out.passed() { "ok" } else { "FAIL" },
            out.name,
            out.report.mi,
            out.chain_rule_residual,
            out.lemma_residual
        ));
        outcomes.push(out);
    }
    if let Some(out) = &cfg.out {
        if let Some(mut o) = begin(ctx, "verify-theory", out, cfg, &[], &["theory.json"])? {
            write_json(&o.file("theory.json"), &outcomes)?;
            o.commit()?;
        }
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("{} case(s): {}", failed.len(), failed.join(", "))).into());
    }
    ctx.note(&format!("all {} cases pass", outcomes.len()));
    Ok(())
}

// ---------------------------------------------------------------- repro

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Dedup (full and half data) against fully duplicated training.
    Table2Desk,
    /// Duplication fractions 0, 0.5 and 1.
    FractionSweep,
    /// Near-duplicate rates of every vocabulary in a directory.
    VocabAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproConfig {
    pub desk: DeskConfig,
    pub fractions: Vec<f64>,
    pub vocab_dir: PathBuf,
    /// Trained runs are cached here and reused across recipes.
    pub cache_dir: PathBuf,
    pub out: Option<PathBuf>,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            fractions: vec![0.0, 0.5, 1.0],
            vocab_dir: PathBuf::from("data/vocabs"),
            cache_dir: PathBuf::from("target/neardup-runs"),
            out: None,
        }
    }
}

pub fn repro(ctx: &Ctx, recipe: Recipe, cfg: &ReproConfig) -> Result<()> {
    let out = require(&cfg.out, "--out")?;
    let mut log = |s: &str| ctx.note(s);
    match recipe {
        Recipe::Table2Desk => {
            let Some(mut o) = begin(
                ctx,
                "repro-table2-desk",
                out,
                cfg,
                &[&cfg.desk.corpus],
                &["table2.json", "table2.txt"],
            )?
            else {
                return Ok(());
            };
            let prep = desk::prepare(&cfg.desk)?;
            let t = desk::table2(&cfg.desk, &prep, &cfg.cache_dir, &mut log)?;
            write_json(&o.file("table2.json"), &t)?;
            std::fs::write(o.file("table2.txt"), t.render())?;
            println!("{}", t.render());
            o.commit()
        }
        Recipe::FractionSweep => {
            let Some(mut o) = begin(
                ctx,
                "repro-fraction-sweep",
                out,
                cfg,
                &[&cfg.desk.corpus],
                &["sweep.json", "sweep.csv"],
            )?
            else {
                return Ok(());
            };
            let prep = desk::prepare(&cfg.desk)?;
            let rows = desk::fraction_sweep(&cfg.desk, &prep, &cfg.fractions, &cfg.cache_dir, &mut log)?;
            let mut csv = String::from("fraction,mean_ppl,std_ppl\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.condition.dup_fraction, r.mean, r.std));
            }
            write_json(&o.file("sweep.json"), &rows)?;
            std::fs::write(o.file("sweep.csv"), &csv)?;
            print!("{csv}");
            o.commit()
        }
        Recipe::VocabAudit => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&cfg.vocab_dir)
                .with_context(|| format!("listing {}", cfg.vocab_dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "tsv" || e == "txt"))
                .collect();
            files.sort();
            if files.is_empty() {
                bail!("no vocabulary files in {}", cfg.vocab_dir.display());
            }
            let inputs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
            let Some(mut o) = begin(ctx, "repro-vocab-audit", out, cfg, &inputs, &["audit.json"])? else {
                return Ok(());
            };
            let mut audit = serde_json::Map::new();
            for f in &files {
                let spec = VocabSpec {
                    path: Some(f.clone()),
                    ..Default::default()
                };
                let report = vocab_report(&spec.load()?, &Rule::NATURAL);
                let name = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
                println!("{name}\n{}", report.render());
                audit.insert(name, serde_json::to_value(report)?);
            }
            write_json(&o.file("audit.json"), &audit)?;
            o.commit()
        }
    }
}
