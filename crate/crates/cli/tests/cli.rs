use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn neardup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neardup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = neardup(args);
    assert!(
        out.status.success(),
        "neardup {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn vocab_fixture_rates_match_hand_count() {
    let vocab = fixture("vocab20.json");
    let out = ok(&[
        "analyze-vocab",
        "--vocab",
        s(&vocab),
        "--format",
        "json-map",
        "--rules",
        "space,lower,plural,all",
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["vocab_size"], 20);
    // canonical sizes counted by hand, merged groups in parentheses:
    // space 17 (the, The, a), lower 15 (▁the, the, ▁books, book, now),
    // plural 19 (cat), all 10 (the, book, cat, now, a)
    let want = [("space", 17, 3), ("lower", 15, 5), ("plural", 19, 1), ("all", 10, 5)];
    let rates = report["rates"].as_array().unwrap();
    assert_eq!(rates.len(), want.len());
    for (r, (rule, canon, merged)) in rates.iter().zip(want) {
        assert_eq!(r["rule"], rule);
        assert_eq!(r["canonical_size"], canon, "{rule}");
        assert_eq!(r["merged_groups"], merged, "{rule}");
        let rate = r["rate"].as_f64().unwrap();
        assert!((rate - (1.0 - canon as f64 / 20.0)).abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    assert_eq!(neardup(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(neardup(&["analyze-vocab", "--rules", "bogus"]).status.code(), Some(1));
    // a missing input is a config error
    assert_eq!(neardup(&["build-kappa", "--rule", "all"]).status.code(), Some(1));
    assert_eq!(
        neardup(&["verify-theory", "--random", "3", "-q"]).status.code(),
        Some(0)
    );
    assert_eq!(neardup(&["--version"]).status.code(), Some(0));
}

fn write_corpus(path: &Path) {
    let words = [
        "the", "The", "cat", "cats", "sat", "on", "a", "mat", "Books", "book", "were", "read", "by", "readers", "and",
        "writers", "now", "Now", "again",
    ];
    let mut lines = Vec::new();
    for d in 0..40u64 {
        let mut text = String::new();
        let mut x = d.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        for i in 0..60 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            if i > 0 {
                text.push(if i % 12 == 0 { '\n' } else { ' ' });
            }
            text.push_str(words[(x % words.len() as u64) as usize]);
        }
        lines.push(serde_json::json!({ "text": text }).to_string());
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

struct Pipeline {
    tok: PathBuf,
    dup: PathBuf,
    model: PathBuf,
    eval: PathBuf,
}

fn pipeline(root: &Path, threads: &str) -> Pipeline {
    let corpus = root.join("corpus.jsonl");
    if !corpus.exists() {
        write_corpus(&corpus);
    }
    let tok = root.join(format!("tok-{threads}"));
    let dup = root.join(format!("dup-{threads}"));
    let model = root.join(format!("model-{threads}"));
    let eval = root.join(format!("eval-{threads}"));
    let t = ["--threads", threads, "-q"];
    let run = |args: &[&str]| ok(&[&t[..], args].concat());
    run(&[
        "tokenize",
        "--input",
        s(&corpus),
        "--vocab-size",
        "300",
        "--test-every",
        "5",
        "--out",
        s(&tok),
    ]);
    run(&[
        "transform",
        "--op",
        "duplicate",
        "--stream",
        s(&tok.join("train.toks")),
        "--vocab",
        s(&tok.join("vocab.json")),
        "--fraction",
        "0.5",
        "--scheme-seed",
        "3",
        "--sample-seed",
        "4",
        "--out",
        s(&dup),
    ]);
    run(&[
        "train",
        "--stream",
        s(&dup.join("stream.toks")),
        "--vocab",
        s(&tok.join("vocab.json")),
        "--scheme",
        s(&dup.join("scheme.json")),
        "--layers",
        "1",
        "--hidden-size",
        "16",
        "--heads",
        "2",
        "--context-length",
        "32",
        "--batch-size",
        "4",
        "--steps",
        "12",
        "--warmup-steps",
        "2",
        "--out",
        s(&model),
    ]);
    // evaluate on the training stream; only bit-identity matters here
    run(&[
        "eval",
        "--checkpoint",
        s(&model.join("model.ckpt")),
        "--stream",
        s(&dup.join("stream.toks")),
        "--vocab",
        s(&tok.join("vocab.json")),
        "--scheme",
        s(&dup.join("scheme.json")),
        "--out",
        s(&eval),
    ]);
    Pipeline { tok, dup, model, eval }
}

fn same_bytes(a: &Path, b: &Path) {
    let x = std::fs::read(a).unwrap_or_else(|e| panic!("{}: {e}", a.display()));
    let y = std::fs::read(b).unwrap_or_else(|e| panic!("{}: {e}", b.display()));
    assert!(x == y, "{} and {} differ", a.display(), b.display());
}

#[test]
fn pipeline_is_bit_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let one = pipeline(dir.path(), "1");
    let four = pipeline(dir.path(), "4");
    for f in ["vocab.json", "merges.tsv", "train.toks", "test.toks"] {
        same_bytes(&one.tok.join(f), &four.tok.join(f));
    }
    for f in ["scheme.json", "vocab.json", "stream.toks"] {
        same_bytes(&one.dup.join(f), &four.dup.join(f));
    }
    for f in ["model.ckpt", "loss.csv"] {
        same_bytes(&one.model.join(f), &four.model.join(f));
    }
    for f in ["records.csv", "summary.json"] {
        same_bytes(&one.eval.join(f), &four.eval.join(f));
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(one.eval.join("summary.json")).unwrap()).unwrap();
    let proj = summary["projected_ppl"].as_f64().unwrap();
    let plain = summary["plain_ppl"].as_f64().unwrap();
    assert!(proj.is_finite() && proj > 1.0 && proj < plain);
}

#[test]
fn unchanged_config_is_skipped_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = fixture("vocab20.json");
    let out = dir.path().join("kappa");
    let args = ["build-kappa", "--vocab", s(&vocab), "--rule", "all", "--out", s(&out)];
    ok(&args);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("kappa.json.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "build-kappa");
    assert!(meta["config_hash"].as_str().unwrap().len() == 64);
    assert!(out.join("build-kappa.config.json").exists());
    assert!(!out.join(".neardup.lock").exists());

    let again = ok(&args);
    assert!(String::from_utf8_lossy(&again.stderr).contains("up to date"));
    let forced = ok(&[&args[..], &["--force"]].concat());
    assert!(!String::from_utf8_lossy(&forced.stderr).contains("up to date"));
    let other = ok(&["build-kappa", "--vocab", s(&vocab), "--rule", "space", "--out", s(&out)]);
    assert!(!String::from_utf8_lossy(&other.stderr).contains("up to date"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({ "op": "ttest", "a": [2.1, 2.0, 2.2], "b": [1.6, 1.8, 1.7] }).to_string(),
    )
    .unwrap();
    let out = ok(&["analyze", "--config", s(&cfg), "--alternative", "greater"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["t"].as_f64().unwrap() - 4.898979485566353).abs() < 1e-9);
    assert!((v["p"].as_f64().unwrap() - 0.0040249465504188665).abs() < 1e-9);
}
