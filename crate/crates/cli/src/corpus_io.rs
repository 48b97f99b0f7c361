//! Reading raw text corpora.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Loads documents from `path`.
///
/// `.jsonl` files hold one JSON object per line with a `"text"` field; any
/// other file is read as a single document.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            match value.get("text").and_then(|t| t.as_str()) {
                Some(t) => docs.push(t.to_string()),
                None => bail!("{}:{}: missing string field \"text\"", path.display(), i + 1),
            }
        }
        Ok(docs)
    } else {
        Ok(vec![text])
    }
}

/// Splits documents into (train, test); every `test_every`-th document goes
/// to test. `test_every == 0` keeps everything for training.
pub fn split_documents(docs: Vec<String>, test_every: usize) -> (Vec<String>, Vec<String>) {
    if test_every == 0 {
        return (docs, Vec::new());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, d) in docs.into_iter().enumerate() {
        if i % test_every == test_every - 1 {
            test.push(d);
        } else {
            train.push(d);
        }
    }
    (train, test)
}
