//! Sliding-window evaluation and projected perplexity.
//!
//! A window covering positions `[a, b)` feeds the model the tokens at
//! `[a-1, b-1)` (eos stands in for position `-1`) and reads off the
//! predictions for `[a, b)`. Window 0 scores every position it covers; later
//! windows score only their last `scored_tail` positions.

use std::io::{Read, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{swap_twins, CorpusError, FlagStream, TokenStream};
use crate::kappa::{DedupMap, DupScheme};
use crate::lm::{LmError, Model};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no records")]
    Empty,
    #[error("invalid window settings: {0}")]
    Window(String),
    #[error("target {target} outside {len} canonical symbols")]
    TargetOutOfRange { target: u32, len: usize },
    #[error("distribution has {found} entries, map expects {expected}")]
    DistLength { expected: usize, found: usize },
    #[error("model vocabulary has {model} entries, map source has {map}")]
    VocabMismatch { model: usize, map: usize },
    #[error("records csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Role of a target symbol in a treatment/control comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupTag {
    Treatment,
    Control,
    #[default]
    None,
}

/// One scored position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalRecord {
    pub position: u64,
    pub target_id: u32,
    pub canonical_id: u32,
    /// Projected surprisal: minus the log of the target group's total mass.
    pub surprisal: f64,
    pub window_index: u32,
    pub local16_dup_fraction: f64,
    pub full_context_dup_fraction: f64,
    pub group_tag: GroupTag,
    /// Surprisal of the exact target id.
    pub plain_surprisal: f64,
}

/// Tokens before the target that feed the local duplicate fraction.
pub const LOCAL_CONTEXT: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub window: usize,
    pub step: usize,
    pub scored_tail: usize,
    /// Per source id tags; `None` tags every record `none`.
    pub tags: Option<Vec<GroupTag>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            window: 512,
            step: 128,
            scored_tail: 128,
            tags: None,
        }
    }
}

impl EvalOptions {
    /// Paper-style protocol scaled to a context length: step and tail are a
    /// quarter of the window.
    pub fn for_context(window: usize) -> Self {
        let tail = (window / 4).max(1);
        Self {
            window,
            step: tail,
            scored_tail: tail,
            tags: None,
        }
    }
}

/// Covered and scored ranges of one evaluation window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub index: u32,
    pub covered: Range<usize>,
    pub scored: Range<usize>,
}

/// Window layout for a stream of `len` tokens.
pub fn plan_windows(len: usize, window: usize, step: usize, tail: usize) -> Result<Vec<Window>, EvalError> {
    if window == 0 || step == 0 || tail == 0 || tail > window {
        return Err(EvalError::Window(format!("window {window}, step {step}, tail {tail}")));
    }
    let mut out = Vec::new();
    if len == 0 {
        return Ok(out);
    }
    out.push(Window {
        index: 0,
        covered: 0..window.min(len),
        scored: 0..window.min(len),
    });
    for i in 1.. {
        let start = i * step;
        let scored_start = start + window - tail;
        if scored_start >= len {
            break;
        }
        let end = (start + window).min(len);
        out.push(Window {
            index: i as u32,
            covered: start..end,
            scored: scored_start..end,
        });
    }
    Ok(out)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-ln Σ_{w ∈ κ⁻¹(target)} dist[w]` for a normalized distribution over the
/// map's source vocabulary.
pub fn projected_surprisal(dist: &[f64], map: &DedupMap, target_canonical: u32) -> Result<f64, EvalError> {
    if dist.len() != map.source_len() {
        return Err(EvalError::DistLength {
            expected: map.source_len(),
            found: dist.len(),
        });
    }
    if target_canonical as usize >= map.canonical_len() {
        return Err(EvalError::TargetOutOfRange {
            target: target_canonical,
            len: map.canonical_len(),
        });
    }
    let mass: f64 = map.members(target_canonical).iter().map(|&id| dist[id as usize]).sum();
    Ok(-mass.ln())
}

/// `exp` of the mean projected surprisal.
pub fn projected_ppl(records: &[SurprisalRecord]) -> Result<f64, EvalError> {
    mean_exp(records.iter().map(|r| r.surprisal), records.len())
}

/// `exp` of the mean surprisal of the exact target ids.
pub fn plain_ppl(records: &[SurprisalRecord]) -> Result<f64, EvalError> {
    mean_exp(records.iter().map(|r| r.plain_surprisal), records.len())
}

fn mean_exp(xs: impl Iterator<Item = f64>, n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let sum: crate::theory::NeumaierSum = xs.collect();
    Ok((sum.value() / n as f64).exp())
}

/// Tags for a partially duplicated vocabulary: duplicated symbols and their
/// twins are treatment, every other non-eos symbol is control.
pub fn tags_for_scheme(scheme: &DupScheme) -> Vec<GroupTag> {
    let n = scheme.dup_vocab().len();
    let eos = scheme.dup_vocab().eos_id() as usize;
    let mut tags = vec![GroupTag::Control; n];
    tags[eos] = GroupTag::None;
    for (b, p) in scheme.twin_pairs() {
        tags[b as usize] = GroupTag::Treatment;
        tags[p as usize] = GroupTag::Treatment;
    }
    tags
}

/// Tags from a predicate on canonical symbols: members of selected groups
/// are treatment, others control, eos none.
pub fn tags_for_groups(map: &DedupMap, treated: impl Fn(u32) -> bool) -> Vec<GroupTag> {
    let eos = map.source_vocab().eos_id();
    (0..map.source_len() as u32)
        .map(|id| {
            if id == eos {
                GroupTag::None
            } else if treated(map.kappa(id)) {
                GroupTag::Treatment
            } else {
                GroupTag::Control
            }
        })
        .collect()
}

/// Scores every stream position with the model, projecting through `map`.
pub fn sliding_window_surprisals(
    model: &Model<f32>,
    stream: &TokenStream,
    map: &DedupMap,
    flags: Option<&FlagStream>,
    opts: &EvalOptions,
) -> Result<Vec<SurprisalRecord>, EvalError> {
    let v = model.config().vocab_size;
    if map.source_len() != v {
        return Err(EvalError::VocabMismatch {
            model: v,
            map: map.source_len(),
        });
    }
    stream.check_vocab(map.source_vocab())?;
    if opts.window > model.config().context_length {
        return Err(EvalError::Window(format!(
            "window {} exceeds the model context {}",
            opts.window,
            model.config().context_length
        )));
    }
    if let Some(f) = flags {
        if f.len() != stream.len() {
            return Err(EvalError::Lm(LmError::FlagLength {
                flags: f.len(),
                tokens: stream.len(),
            }));
        }
    }
    if let Some(t) = &opts.tags {
        if t.len() != v {
            return Err(EvalError::Window(format!("{} tags for {v} symbols", t.len())));
        }
    }
    let windows = plan_windows(stream.len(), opts.window, opts.step, opts.scored_tail)?;
    let ids = stream.ids();
    let eos = map.source_vocab().eos_id();
    let duplicated: Vec<bool> = match &opts.tags {
        Some(t) => t.iter().map(|&g| g == GroupTag::Treatment).collect(),
        None => (0..v as u32).map(|id| map.members(map.kappa(id)).len() > 1).collect(),
    };
    // prefix counts of duplicated tokens, for O(1) context fractions
    let mut dup_prefix = Vec::with_capacity(ids.len() + 1);
    dup_prefix.push(0u32);
    for &id in ids {
        let last = *dup_prefix.last().unwrap();
        dup_prefix.push(last + duplicated[id as usize] as u32);
    }
    let frac = |a: usize, b: usize| {
        if b <= a {
            0.0
        } else {
            (dup_prefix[b] - dup_prefix[a]) as f64 / (b - a) as f64
        }
    };

    let per_window: Vec<Result<Vec<SurprisalRecord>, EvalError>> = windows
        .par_iter()
        .map(|w| {
            let a = w.covered.start;
            let b = w.covered.end;
            let mut input = Vec::with_capacity(b - a);
            input.push(if a == 0 { eos } else { ids[a - 1] });
            input.extend_from_slice(&ids[a..b - 1]);
            let input_flags = flags.map(|f| {
                let mut fl = Vec::with_capacity(b - a);
                fl.push(if a == 0 {
                    crate::kappa::RuleFlags::NONE
                } else {
                    f.flags()[a - 1]
                });
                fl.extend_from_slice(&f.flags()[a..b - 1]);
                fl
            });
            let rows = (w.scored.start - a)..(w.scored.end - a);
            let logp = model.log_probs(&input, input_flags.as_deref(), rows)?;
            let mut out = Vec::with_capacity(w.scored.len());
            for (r, pos) in w.scored.clone().enumerate() {
                let row = &logp[r * v..(r + 1) * v];
                let target = ids[pos];
                let canonical = map.kappa(target);
                let members = map.members(canonical);
                let projected = -log_sum_exp(members.iter().map(|&m| row[m as usize] as f64));
                out.push(SurprisalRecord {
                    position: pos as u64,
                    target_id: target,
                    canonical_id: canonical,
                    surprisal: projected.max(0.0),
                    window_index: w.index,
                    local16_dup_fraction: frac(pos.saturating_sub(LOCAL_CONTEXT).max(a), pos),
                    full_context_dup_fraction: frac(a, pos),
                    group_tag: opts.tags.as_ref().map_or(GroupTag::None, |t| t[target as usize]),
                    plain_surprisal: (-(row[target as usize] as f64)).max(0.0),
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::with_capacity(stream.len());
    for w in per_window {
        records.extend(w?);
    }
    Ok(records)
}

/// Projected perplexity on the stream and on the stream with every twin
/// pair exchanged.
pub fn swap_probe(
    model: &Model<f32>,
    stream: &TokenStream,
    scheme: &DupScheme,
    opts: &EvalOptions,
) -> Result<(f64, f64), EvalError> {
    let map = scheme.dedup_map();
    let swapped = swap_twins(stream, scheme)?;
    let original = projected_ppl(&sliding_window_surprisals(model, stream, &map, None, opts)?)?;
    let exchanged = projected_ppl(&sliding_window_surprisals(model, &swapped, &map, None, opts)?)?;
    Ok((original, exchanged))
}

pub fn write_records<W: Write>(w: W, records: &[SurprisalRecord]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<SurprisalRecord>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
