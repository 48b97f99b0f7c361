//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! criterion fails outside the documented deviations.
//!
//! Environment:
//! - `NEARDUP_DATA_DIR`: vocabularies and corpus (default `<workspace>/data`)
//! - `NEARDUP_RUN_CACHE`: desk run cache (default `<workspace>/target/neardup-runs`)
//! - `NEARDUP_SKIP_DESK=1`: skip the training criteria
//! - `NEARDUP_DESK_TOKENS`: override the full-data training budget

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use neardup::analysis::{duplicate_pair_similarity, fit_power_law, quartile_means, welch_t_test, Alternative};
use neardup::corpus::{apply_kappa_stream, duplicate_sample_stream, noncanonical_flag_stream, TokenStream};
use neardup::eval::{projected_surprisal, sliding_window_surprisals, write_records, EvalOptions};
use neardup::kappa::{build_kappa, build_synthetic_dup, DedupMap};
use neardup::lm::{train, EmbeddingSide, LmConfig, TrainSchedule};
use neardup::rng::{counter_u64, counter_uniform};
use neardup::theory::{check_case, random_case, softmax_collapse_check, CaseKind, CaseTolerance};
use neardup::vocab::{LoadOptions, VocabFormat};
use neardup::{Rule, RuleFlags, Vocabulary};
use neardup_cli::desk::{self, Condition, DeskConfig, Prepared};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Fails for a reason analysed in the decisions ledger.
    KnownDeviation,
    Skip,
}

struct Line {
    id: u32,
    title: &'static str,
    status: Status,
    detail: String,
}

impl Line {
    fn print(&self) {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::KnownDeviation => "FAIL (known deviation)",
            Status::Skip => "SKIP",
        };
        println!("criterion {} [{tag}] {}: {}", self.id, self.title, self.detail);
    }
}

fn line(id: u32, title: &'static str, ok: bool, detail: String) -> Line {
    Line {
        id,
        title,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn workspace() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    p.canonicalize().unwrap_or(p)
}

fn data_dir() -> PathBuf {
    std::env::var_os("NEARDUP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn uniform(seed: u64, k: u64) -> f64 {
    counter_uniform(seed, 0xacce, k)
}

fn gaussian(seed: u64, k: u64) -> f64 {
    let u1 = uniform(seed, 2 * k).max(1e-300);
    let u2 = uniform(seed, 2 * k + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn numbered_vocab(n: usize) -> Arc<Vocabulary> {
    let mut e = vec!["<eos>".to_string()];
    e.extend((1..n).map(|i| format!("t{i}")));
    Arc::new(Vocabulary::from_entries(e, 0).unwrap())
}

// ------------------------------------------------------------------ 1

fn theory_identities() -> Line {
    let start = Instant::now();
    let tol = CaseTolerance::default();
    let (mut n, mut failed, mut worst) = (0, Vec::new(), 0.0f64);
    let mut kinds = [0usize; 3];
    for seed in 0..150u64 {
        let case = random_case(seed);
        let out = check_case(&case, &tol).expect("random cases are enumerable");
        n += 1;
        kinds[match case.kind {
            CaseKind::General => 0,
            CaseKind::Perfect => 1,
            CaseKind::ContextDependent => 2,
        }] += 1;
        worst = worst.max(out.chain_rule_residual.abs()).max(out.lemma_residual.abs());
        if !out.passed() {
            failed.push(format!("{}: {}", out.name, out.failures.join("; ")));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        "theory identities",
        failed.is_empty() && secs < 60.0,
        format!(
            "{n} cases ({} general, {} perfect, {} context-dependent), worst identity residual {worst:.1e} nats, {} failed, {secs:.2}s{}",
            kinds[0],
            kinds[1],
            kinds[2],
            failed.len(),
            failed.first().map(|f| format!(" [{f}]")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------------ 2

fn softmax_collapse() -> Line {
    let start = Instant::now();
    let (v, d) = (60, 24);
    let base = numbered_vocab(v);
    let (scheme, _) = build_synthetic_dup(base, 0.6, 0.5, 17).unwrap();
    let rows: Vec<Vec<f64>> = (0..v as u64)
        .map(|i| (0..d as u64).map(|j| gaussian(1, i * 1000 + j)).collect())
        .collect();
    let hidden: Vec<Vec<f64>> = (0..1000u64)
        .map(|h| (0..d as u64).map(|j| 2.0 * gaussian(2, h * 1000 + j)).collect())
        .collect();
    let dev = softmax_collapse_check(&hidden, &rows, &scheme);
    line(
        2,
        "twin softmax collapse",
        dev <= 1e-12,
        format!(
            "1000 hidden states, {} twins, max |summed twin prob - dedup prob| = {dev:.2e} ({:.2}s)",
            scheme.duplicated_count(),
            start.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 3

fn random_map(seed: u64, n: usize) -> DedupMap {
    let vocab = numbered_vocab(n);
    let m = 2 + (counter_u64(seed, 10, 0) as usize) % (n - 1);
    // eos alone in group 0; ids 1..m seed the remaining groups in a shuffled
    // order, the rest join random groups.
    let mut groups: Vec<u32> = (1..m as u32).collect();
    for i in (1..groups.len()).rev() {
        let j = (counter_u64(seed, 11, i as u64) % (i as u64 + 1)) as usize;
        groups.swap(i, j);
    }
    let mut kappa = vec![0u32; n];
    for id in 1..n {
        kappa[id] = if id < m {
            groups[id - 1]
        } else {
            1 + (counter_u64(seed, 12, id as u64) % (m as u64 - 1)) as u32
        };
    }
    let mut first = vec![usize::MAX; m];
    for (id, &c) in kappa.iter().enumerate() {
        first[c as usize] = first[c as usize].min(id);
    }
    let keys = (0..m).map(|c| format!("g{c}")).collect();
    let is_canonical = (0..n).map(|id| first[kappa[id] as usize] == id).collect();
    DedupMap::from_assignment(vocab, "random", keys, kappa, vec![RuleFlags::NONE; n], is_canonical).unwrap()
}

fn projected_oracle() -> Line {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut largest = 0;
    for case in 0..1000u64 {
        let n = 2 + (counter_u64(case, 20, 0) % 9_999) as usize;
        largest = largest.max(n);
        let map = random_map(case, n);
        let scale = 4.0 * uniform(case, 1);
        let w: Vec<f64> = (0..n as u64).map(|i| (scale * gaussian(case + 7, i)).exp()).collect();
        let z: f64 = w.iter().sum();
        let dist: Vec<f64> = w.iter().map(|x| x / z).collect();
        let target = (counter_u64(case, 21, 0) % map.canonical_len() as u64) as u32;
        let got = projected_surprisal(&dist, &map, target).unwrap();
        // brute force: scan every id, sum in increasing order
        let mut mass: Vec<f64> = (0..n)
            .filter(|&id| map.kappa(id as u32) == target)
            .map(|id| dist[id])
            .collect();
        mass.sort_by(f64::total_cmp);
        let want = -mass.iter().sum::<f64>().ln();
        worst = worst.max((got - want).abs());
    }
    line(
        3,
        "projected surprisal oracle",
        worst <= 1e-10,
        format!(
            "1000 cases, vocab up to {largest}, max deviation {worst:.2e} nats ({:.2}s)",
            start.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 4

struct Audit {
    file: &'static str,
    label: &'static str,
    /// space, lower, plural, all
    target: [f64; 4],
}

const AUDITS: [Audit; 4] = [
    Audit {
        file: "cl100k.json",
        label: "GPT-4",
        target: [19.0, 24.0, 9.0, 43.0],
    },
    Audit {
        file: "llama.json",
        label: "Llama",
        target: [17.0, 31.0, 22.0, 35.0],
    },
    Audit {
        file: "mistral.json",
        label: "Mistral",
        target: [15.0, 32.0, 23.0, 37.0],
    },
    Audit {
        file: "gemma.json",
        label: "Gemma",
        target: [21.0, 20.0, 7.0, 39.0],
    },
];

/// Rate of lowercasing or plural-stripping after whitespace has already been
/// removed; printed as a diagnostic only.
fn composed_rate(v: &Vocabulary, second: Rule) -> f64 {
    let mut keys = std::collections::HashSet::new();
    for id in 0..v.len() as u32 {
        if id == v.eos_id() {
            keys.insert("\u{0}eos".to_string());
            continue;
        }
        let s = neardup::kappa::canonical_key(v.surface(id), Rule::Space);
        keys.insert(neardup::kappa::canonical_key(&s, second));
    }
    100.0 * (1.0 - keys.len() as f64 / v.len() as f64)
}

fn vocab_audit() -> Line {
    let dir = data_dir().join("vocabs");
    let missing: Vec<&str> = AUDITS
        .iter()
        .filter(|a| !dir.join(a.file).exists())
        .map(|a| a.file)
        .collect();
    if !missing.is_empty() {
        return Line {
            id: 4,
            title: "vocabulary audit",
            status: Status::Skip,
            detail: format!(
                "missing {} in {} (run scripts/fetch_data.py)",
                missing.join(", "),
                dir.display()
            ),
        };
    }
    let mut all_ok = true;
    let mut rules_ok = true;
    let mut slow = false;
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    for a in &AUDITS {
        let start = Instant::now();
        let text = std::fs::read_to_string(dir.join(a.file)).unwrap();
        let v = Arc::new(Vocabulary::parse(&text, VocabFormat::JsonMap, &LoadOptions::default()).unwrap());
        let rates: Vec<f64> = Rule::NATURAL
            .iter()
            .map(|&r| 100.0 * build_kappa(v.clone(), r).near_duplicate_rate())
            .collect();
        let secs = start.elapsed().as_secs_f64();
        slow |= secs >= 60.0;
        all_ok &= (rates[3] - a.target[3]).abs() <= 2.0;
        let mut off = Vec::new();
        for (k, name) in ["space", "lower", "plural"].iter().enumerate() {
            if (rates[k] - a.target[k]).abs() > 3.0 {
                off.push(*name);
            }
        }
        if !off.is_empty() {
            rules_ok = false;
            notes.push(format!(
                "{} {} off by more than 3 points (after whitespace stripping: lower {:.1}, plural {:.1})",
                a.label,
                off.join("/"),
                composed_rate(&v, Rule::Lower),
                composed_rate(&v, Rule::Plural)
            ));
        }
        parts.push(format!(
            "{} |V|={} space {:.1} lower {:.1} plural {:.1} all {:.1} (target {}/{}/{}/{}, {secs:.1}s)",
            a.label,
            v.len(),
            rates[0],
            rates[1],
            rates[2],
            rates[3],
            a.target[0],
            a.target[1],
            a.target[2],
            a.target[3]
        ));
    }
    let status = if !all_ok || slow {
        Status::Fail
    } else if !rules_ok {
        Status::KnownDeviation
    } else {
        Status::Pass
    };
    let mut detail = format!(
        "all-rule rates {} within 2 points; per-rule rates {} within 3 points\n    {}",
        if all_ok { "all" } else { "NOT all" },
        if rules_ok { "all" } else { "NOT all" },
        parts.join("\n    ")
    );
    for n in notes {
        detail.push_str("\n    ");
        detail.push_str(&n);
    }
    Line {
        id: 4,
        title: "vocabulary audit",
        status,
        detail,
    }
}

// ------------------------------------------------------------------ 5-7

fn desk_config() -> DeskConfig {
    let mut cfg = DeskConfig {
        corpus: data_dir().join("corpus/sotu.jsonl"),
        ..DeskConfig::default()
    };
    if let Some(t) = std::env::var("NEARDUP_DESK_TOKENS").ok().and_then(|s| s.parse().ok()) {
        cfg.train_tokens = t;
    }
    cfg
}

fn desk_cache() -> PathBuf {
    std::env::var_os("NEARDUP_RUN_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("target/neardup-runs"))
}

fn desk_skip(reason: &str) -> Vec<Line> {
    [
        (5, "desk Table 2 ordering"),
        (6, "fraction sweep"),
        (7, "twin embedding alignment"),
    ]
    .into_iter()
    .map(|(id, title)| Line {
        id,
        title,
        status: Status::Skip,
        detail: reason.to_string(),
    })
    .collect()
}

fn desk_criteria() -> Vec<Line> {
    if std::env::var("NEARDUP_SKIP_DESK").is_ok_and(|v| v == "1") {
        return desk_skip("NEARDUP_SKIP_DESK=1");
    }
    let cfg = desk_config();
    if !cfg.corpus.exists() {
        return desk_skip(&format!("{} missing (run scripts/fetch_data.py)", cfg.corpus.display()));
    }
    let start = Instant::now();
    let prep = desk::prepare(&cfg).expect("corpus prepares");
    let cache = desk_cache();
    let mut log = |s: &str| eprintln!("  {s}");
    let fractions = [0.0, 0.5, 1.0];
    let conds = [
        Condition::dedup_full(),
        Condition::duplicated_fraction(0.5),
        Condition::duplicated_full(),
        Condition::dedup_half(),
    ];
    let runs = desk::run_conditions(&cfg, &prep, &conds, &cache, &mut log).expect("desk runs");
    let mean = |name: &str| runs.iter().find(|(s, _)| s.condition.name == name).unwrap().0.clone();
    let (full, half_dup, dup, half) = (
        mean("dedup-full"),
        mean(&Condition::duplicated_fraction(0.5).name),
        mean("duplicated-full"),
        mean("dedup-50%"),
    );
    let secs = start.elapsed().as_secs_f64();

    let t = welch_t_test(&full.ppl, &dup.ppl, Alternative::Less).expect("three seeds");
    let ordered = full.mean < dup.mean && dup.mean < half.mean;
    let fmt = |s: &desk::ConditionSummary| {
        let per: Vec<String> = s.ppl.iter().map(|p| format!("{p:.2}")).collect();
        format!("{} {:.2} [{}]", s.condition.name, s.mean, per.join(" "))
    };
    let c5 = line(
        5,
        "desk Table 2 ordering",
        ordered && t.p <= 0.05,
        format!(
            "{} < {} < {}: {}; Welch one-sided p = {:.2e} (t = {:.2}, df = {:.2}); {} train tokens, {} seeds, {secs:.0}s",
            fmt(&full),
            fmt(&dup),
            fmt(&half),
            if ordered { "holds" } else { "violated" },
            t.p,
            t.t,
            t.df,
            cfg.train_tokens,
            cfg.seeds.len()
        ),
    );

    let sweep = [&full, &half_dup, &dup];
    let monotone = sweep.windows(2).all(|w| w[0].mean <= w[1].mean);
    let c6 = line(
        6,
        "fraction sweep",
        monotone,
        format!(
            "mean PPL_k at fractions {:?}: {}",
            fractions,
            sweep
                .iter()
                .map(|s| format!("{:.2}", s.mean))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    vec![c5, c6, twin_alignment(&cfg, &prep, &runs)]
}

fn twin_alignment(
    cfg: &DeskConfig,
    prep: &Prepared,
    runs: &[(desk::ConditionSummary, Vec<desk::RunArtifacts>)],
) -> Line {
    let arts = &runs
        .iter()
        .find(|(s, _)| s.condition.name == "duplicated-full")
        .unwrap()
        .1;
    let cond = Condition::duplicated_full();
    let mut counts = vec![0u64; prep.base_vocab().len()];
    for &id in prep.train_prefix(cfg, &cond).ids() {
        counts[id as usize] += 1;
    }
    let mut gaps = Vec::new();
    let mut per_pair: Vec<(f64, u64)> = Vec::new();
    for art in arts {
        let ckpt = art.checkpoint().expect("checkpoint loads");
        let scheme = art
            .scheme(prep)
            .expect("scheme loads")
            .expect("duplicated run has a scheme");
        let pairs = scheme.twin_pairs();
        let sim = duplicate_pair_similarity(&ckpt.model, &pairs, EmbeddingSide::Input, art.result.seed).unwrap();
        gaps.push((sim.pair_mean(), sim.baseline_mean()));
        if per_pair.is_empty() {
            per_pair = sim.pairs.iter().map(|p| (0.0, counts[p.a as usize])).collect();
        }
        for (slot, p) in per_pair.iter_mut().zip(&sim.pairs) {
            slot.0 += p.cosine / arts.len() as f64;
        }
    }
    let twin = gaps.iter().map(|g| g.0).sum::<f64>() / gaps.len() as f64;
    let base = gaps.iter().map(|g| g.1).sum::<f64>() / gaps.len() as f64;
    let q = quartile_means(&per_pair).expect("enough pairs");
    line(
        7,
        "twin embedding alignment",
        twin - base >= 0.2 && q[3] > q[0],
        format!(
            "input cosine twins {twin:.3} vs random pairs {base:.3} (gap {:.3}); by train frequency quartile {:.3} {:.3} {:.3} {:.3}",
            twin - base,
            q[0],
            q[1],
            q[2],
            q[3]
        ),
    )
}

// ------------------------------------------------------------------ 8

fn efficiency_fit() -> Line {
    let fit = fit_power_law(&[(0.5, 25.3), (0.85, 22.6), (1.0, 21.9)]).unwrap();
    let ratio = fit.invert(22.7);
    line(
        8,
        "data-efficiency fit",
        (0.82..=0.88).contains(&ratio),
        format!(
            "PPL = {:.3} n^{:.4}, inverting at 22.7 gives n = {ratio:.4} of the full data",
            fit.a, fit.b
        ),
    )
}

// ------------------------------------------------------------------ 9

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn artifacts() -> Vec<Vec<u8>> {
    let v = numbered_vocab(300);
    let ids: Vec<u32> = (0..200_000u64)
        .map(|i| {
            if i % 97 == 96 || i == 199_999 {
                0
            } else {
                1 + (counter_u64(5, 30, i) % 299) as u32
            }
        })
        .collect();
    let stream = TokenStream::from_ids(ids, &v).unwrap();
    let (scheme, map) = build_synthetic_dup(v.clone(), 0.5, 0.5, 8).unwrap();
    let dup = duplicate_sample_stream(&stream, &scheme, 9).unwrap();
    let back = apply_kappa_stream(&dup, &map).unwrap();
    let flags = noncanonical_flag_stream(&dup, &map).unwrap();

    let mut model = LmConfig::micro(dup.vocab_len());
    model.context_length = 32;
    model.seed = 4;
    let schedule = TrainSchedule {
        batch_size: 4,
        steps: 10,
        warmup_steps: 2,
        data_seed: 6,
        ..Default::default()
    };
    let small = TokenStream::from_ids(
        dup.ids()[..4_000].iter().copied().chain([0]).collect(),
        scheme.dup_vocab(),
    )
    .unwrap();
    let ckpt = train(&model, &schedule, &small, None).unwrap();
    let records = sliding_window_surprisals(&ckpt.model, &small, &map, None, &EvalOptions::for_context(32)).unwrap();

    let mut out = vec![Vec::new(); 5];
    dup.write_to(&mut out[0]).unwrap();
    back.write_to(&mut out[1]).unwrap();
    flags.write_to(&mut out[2]).unwrap();
    ckpt.write_to(&mut out[3]).unwrap();
    write_records(&mut out[4], &records).unwrap();
    out
}

fn determinism() -> Line {
    let start = Instant::now();
    let a = in_pool(1, artifacts);
    let b = in_pool(1, artifacts);
    let c = in_pool(4, artifacts);
    let names = [
        "duplicated stream",
        "dedup stream",
        "flags",
        "checkpoint",
        "eval records",
    ];
    let differing: Vec<&str> = names
        .iter()
        .enumerate()
        .filter(|&(i, _)| a[i] != b[i] || a[i] != c[i])
        .map(|(_, n)| *n)
        .collect();
    line(
        9,
        "determinism",
        differing.is_empty(),
        format!(
            "transform, train and eval artifacts ({} bytes) compared across reruns and 1 vs 4 threads: {} ({:.1}s)",
            a.iter().map(Vec::len).sum::<usize>(),
            if differing.is_empty() {
                "bit-identical".to_string()
            } else {
                format!("differ in {}", differing.join(", "))
            },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture may be passed through; none apply
    let mut lines = vec![
        theory_identities(),
        softmax_collapse(),
        projected_oracle(),
        vocab_audit(),
        efficiency_fit(),
        determinism(),
    ];
    lines.extend(desk_criteria());
    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        l.print();
    }
    let failed: Vec<u32> = lines
        .iter()
        .filter(|l| l.status == Status::Fail)
        .map(|l| l.id)
        .collect();
    let known = lines.iter().filter(|l| l.status == Status::KnownDeviation).count();
    let skipped = lines.iter().filter(|l| l.status == Status::Skip).count();
    println!(
        "acceptance: {} pass, {} fail, {known} known deviation, {skipped} skipped",
        lines.iter().filter(|l| l.status == Status::Pass).count(),
        failed.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
