//! Exact information-theoretic bookkeeping over small, fully enumerable
//! distributions on eos-terminated sequences.
//!
//! Every quantity is a plain sum over the explicit support. Prefix
//! probabilities `p(w_<t)` are the total mass of sequences sharing the
//! prefix. All logarithms are natural.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kappa::{build_dup_for_ids, build_kappa, DedupMap, DupScheme, Rule};
use crate::vocab::{VocabError, Vocabulary};

/// Upper bound on `|Σ|^L` for exhaustive enumeration.
pub const ENUMERATION_LIMIT: f64 = 1e7;

/// Tolerance on total probability mass.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("enumeration of {size:.3e} sequences exceeds the limit of {limit:.0e}")]
    TooLarge { size: f64, limit: f64 },
    #[error("distribution mass is {mass}, expected 1")]
    Unnormalized { mass: f64 },
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("distribution and map use different vocabularies")]
    VocabMismatch,
    #[error("bad distribution file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Neumaier's compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistKind {
    /// Explicit mass per sequence; each sequence ends with eos.
    Explicit(Vec<(Vec<u32>, f64)>),
    /// First-order chain with eos absorbing. The token at position `max_len`
    /// is forced to eos, so the mass of longer continuations is truncated
    /// onto the sequence ending there.
    Markov {
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

/// A distribution over eos-terminated sequences of length at most `max_len`.
#[derive(Debug, Clone)]
pub struct DistSpec {
    pub vocab: Arc<Vocabulary>,
    pub kind: DistKind,
    pub max_len: usize,
}

/// Exact entropies in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    #[serde(rename = "H_W")]
    pub h_w: f64,
    #[serde(rename = "H_Wbar")]
    pub h_wbar: f64,
    #[serde(rename = "H_W_given_Wbar")]
    pub h_w_given_wbar: f64,
    #[serde(rename = "H_kappa")]
    pub h_kappa: f64,
    /// H(W_<T | W̄_≤T)
    #[serde(rename = "H_cond_leq")]
    pub h_cond_leq: f64,
    /// H(W_<T | W̄_<T)
    #[serde(rename = "H_cond_lt")]
    pub h_cond_lt: f64,
    #[serde(rename = "MI")]
    pub mi: f64,
}

impl ExactReport {
    /// `H_κ − (H(W̄) − MI)`, zero up to rounding.
    pub fn lemma_residual(&self) -> f64 {
        self.h_kappa - (self.h_wbar - self.mi)
    }

    /// `H(W) − (H(W̄) + H(W|W̄))`, zero up to rounding.
    pub fn chain_rule_residual(&self) -> f64 {
        self.h_w - (self.h_wbar + self.h_w_given_wbar)
    }
}

impl DistSpec {
    pub fn explicit(
        vocab: Arc<Vocabulary>,
        sequences: Vec<(Vec<u32>, f64)>,
        max_len: usize,
    ) -> Result<Self, TheoryError> {
        let d = Self {
            vocab,
            kind: DistKind::Explicit(sequences),
            max_len,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn markov(
        vocab: Arc<Vocabulary>,
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        max_len: usize,
    ) -> Result<Self, TheoryError> {
        let d = Self {
            vocab,
            kind: DistKind::Markov { initial, transition },
            max_len,
        };
        d.validate()?;
        Ok(d)
    }

    fn check_row(&self, row: &[f64], what: &str) -> Result<(), TheoryError> {
        if row.len() != self.vocab.len() {
            return Err(TheoryError::Invalid(format!(
                "{what} has {} entries for a vocabulary of {}",
                row.len(),
                self.vocab.len()
            )));
        }
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(TheoryError::Invalid(format!(
                "{what} has a negative or non-finite entry"
            )));
        }
        let mass: f64 = row.iter().copied().collect::<NeumaierSum>().value();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(TheoryError::Unnormalized { mass });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.max_len == 0 {
            return Err(TheoryError::Invalid("max_len must be at least 1".into()));
        }
        let eos = self.vocab.eos_id();
        match &self.kind {
            DistKind::Explicit(seqs) => {
                let mut seen = std::collections::HashSet::new();
                let mut mass = NeumaierSum::new();
                for (s, p) in seqs {
                    if !(*p >= 0.0) || !p.is_finite() {
                        return Err(TheoryError::Invalid(format!("sequence mass {p}")));
                    }
                    if s.is_empty() || s.len() > self.max_len {
                        return Err(TheoryError::Invalid(format!(
                            "sequence of length {} outside 1..={}",
                            s.len(),
                            self.max_len
                        )));
                    }
                    if s.iter().any(|&id| id as usize >= self.vocab.len()) {
                        return Err(TheoryError::Invalid("token id out of range".into()));
                    }
                    if *s.last().unwrap() != eos {
                        return Err(TheoryError::Invalid("sequence does not end with eos".into()));
                    }
                    if *p > 0.0 && s[..s.len() - 1].contains(&eos) {
                        return Err(TheoryError::Invalid("mass on a mid-sequence eos".into()));
                    }
                    if !seen.insert(s.as_slice()) {
                        return Err(TheoryError::Invalid("sequence listed twice".into()));
                    }
                    mass.add(*p);
                }
                let mass = mass.value();
                if (mass - 1.0).abs() > MASS_TOLERANCE {
                    return Err(TheoryError::Unnormalized { mass });
                }
            }
            DistKind::Markov { initial, transition } => {
                self.check_row(initial, "initial distribution")?;
                if transition.len() != self.vocab.len() {
                    return Err(TheoryError::Invalid("transition matrix must be square".into()));
                }
                for (i, row) in transition.iter().enumerate() {
                    if i as u32 != eos {
                        self.check_row(row, &format!("transition row {i}"))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_bound(&self) -> Result<(), TheoryError> {
        let size = (self.vocab.len() as f64).powi(self.max_len as i32);
        if size > ENUMERATION_LIMIT {
            return Err(TheoryError::TooLarge {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(())
    }

    /// The support with its mass; zero-mass sequences are dropped.
    pub fn enumerate(&self) -> Result<Vec<(Vec<u32>, f64)>, TheoryError> {
        self.check_bound()?;
        match &self.kind {
            DistKind::Explicit(seqs) => Ok(seqs.iter().filter(|(_, p)| *p > 0.0).cloned().collect()),
            DistKind::Markov { initial, transition } => {
                let eos = self.vocab.eos_id();
                let mut out = Vec::new();
                let mut stack: Vec<(Vec<u32>, f64)> = Vec::new();
                for (id, &p) in initial.iter().enumerate() {
                    if p > 0.0 {
                        stack.push((vec![id as u32], p));
                    }
                }
                while let Some((mut s, p)) = stack.pop() {
                    let last = *s.last().unwrap();
                    if last == eos {
                        out.push((s, p));
                        continue;
                    }
                    if s.len() + 1 == self.max_len || self.max_len == 1 {
                        if self.max_len == 1 {
                            // a first token that is not eos cannot be completed
                            continue;
                        }
                        s.push(eos);
                        out.push((s, p));
                        continue;
                    }
                    for (next, &q) in transition[last as usize].iter().enumerate() {
                        if q > 0.0 {
                            let mut t = s.clone();
                            t.push(next as u32);
                            stack.push((t, p * q));
                        }
                    }
                }
                out.sort_by(|a, b| a.0.cmp(&b.0));
                let mass: f64 = out.iter().map(|(_, p)| *p).collect::<NeumaierSum>().value();
                if (mass - 1.0).abs() > MASS_TOLERANCE {
                    return Err(TheoryError::Unnormalized { mass });
                }
                Ok(out)
            }
        }
    }

    /// The same distribution in explicit form.
    pub fn to_explicit(&self) -> Result<DistSpec, TheoryError> {
        Ok(DistSpec {
            vocab: self.vocab.clone(),
            kind: DistKind::Explicit(self.enumerate()?),
            max_len: self.max_len,
        })
    }

    pub fn to_json(&self) -> String {
        let vocab = self.vocab.entries().to_vec();
        let eos = self.vocab.surface(self.vocab.eos_id()).to_string();
        let file = match &self.kind {
            DistKind::Explicit(seqs) => DistFile::Explicit {
                vocab,
                eos,
                max_len: self.max_len,
                sequences: seqs
                    .iter()
                    .map(|(s, p)| SeqEntry {
                        tokens: s.iter().map(|&id| self.vocab.surface(id).to_string()).collect(),
                        prob: *p,
                    })
                    .collect(),
            },
            DistKind::Markov { initial, transition } => DistFile::Markov {
                vocab,
                eos,
                max_len: self.max_len,
                initial: initial.clone(),
                transition: transition.clone(),
            },
        };
        serde_json::to_string_pretty(&file).expect("distribution serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TheoryError> {
        let file: DistFile = serde_json::from_str(text).map_err(|e| TheoryError::Malformed(e.to_string()))?;
        let (vocab, eos, max_len) = match &file {
            DistFile::Explicit {
                vocab, eos, max_len, ..
            }
            | DistFile::Markov {
                vocab, eos, max_len, ..
            } => (vocab, eos, *max_len),
        };
        let eos_id = vocab
            .iter()
            .position(|e| e == eos)
            .ok_or_else(|| TheoryError::Malformed(format!("eos {eos:?} is not in the vocabulary")))?;
        let v = Arc::new(Vocabulary::from_entries(vocab.clone(), eos_id as u32)?);
        match file {
            DistFile::Explicit { sequences, .. } => {
                let seqs = sequences
                    .into_iter()
                    .map(|e| {
                        let ids = e
                            .tokens
                            .iter()
                            .map(|t| {
                                v.id_of(t)
                                    .ok_or_else(|| TheoryError::Malformed(format!("unknown token {t:?}")))
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok((ids, e.prob))
                    })
                    .collect::<Result<Vec<_>, TheoryError>>()?;
                Self::explicit(v, seqs, max_len)
            }
            DistFile::Markov {
                initial, transition, ..
            } => Self::markov(v, initial, transition, max_len),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SeqEntry {
    tokens: Vec<String>,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DistFile {
    Explicit {
        vocab: Vec<String>,
        eos: String,
        max_len: usize,
        sequences: Vec<SeqEntry>,
    },
    Markov {
        vocab: Vec<String>,
        eos: String,
        max_len: usize,
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

fn neg_log(x: f64) -> f64 {
    -x.ln()
}

/// Computes every report quantity by exhaustive enumeration.
pub fn exact_quantities(dist: &DistSpec, map: &DedupMap) -> Result<ExactReport, TheoryError> {
    if map.source_vocab().content_hash() != dist.vocab.content_hash() {
        return Err(TheoryError::VocabMismatch);
    }
    let support = dist.enumerate()?;
    let kappa = map.kappa_table();
    let canon: Vec<Vec<u32>> = support
        .iter()
        .map(|(w, _)| w.iter().map(|&id| kappa[id as usize]).collect())
        .collect();

    // p(w_<t) over source prefixes, p(w_<t, κ(w_t)), and p(w̄_≤t)
    let mut p_prefix: HashMap<&[u32], NeumaierSum> = HashMap::new();
    let mut p_prefix_class: HashMap<(&[u32], u32), NeumaierSum> = HashMap::new();
    let mut p_canon_prefix: HashMap<&[u32], NeumaierSum> = HashMap::new();
    for ((w, p), wb) in support.iter().zip(&canon) {
        for t in 0..=w.len() {
            p_prefix.entry(&w[..t]).or_default().add(*p);
            p_canon_prefix.entry(&wb[..t]).or_default().add(*p);
        }
        for t in 0..w.len() {
            p_prefix_class.entry((&w[..t], wb[t])).or_default().add(*p);
        }
    }
    let get = |m: &HashMap<&[u32], NeumaierSum>, k: &[u32]| m[k].value();

    let mut h_w = NeumaierSum::new();
    let mut h_w_given_wbar = NeumaierSum::new();
    let mut h_kappa = NeumaierSum::new();
    let mut h_leq = NeumaierSum::new();
    let mut h_lt = NeumaierSum::new();
    for ((w, p), wb) in support.iter().zip(&canon) {
        let p = *p;
        let p_wbar = get(&p_canon_prefix, wb);
        h_w.add(p * neg_log(p));
        h_w_given_wbar.add(p * (p_wbar / p).ln());
        for t in 0..w.len() {
            let prefix = get(&p_prefix, &w[..t]);
            let joint = p_prefix_class[&(&w[..t], wb[t])].value();
            let canon_lt = get(&p_canon_prefix, &wb[..t]);
            let canon_leq = get(&p_canon_prefix, &wb[..=t]);
            h_kappa.add(p * neg_log(joint / prefix));
            h_leq.add(p * neg_log(joint / canon_leq));
            h_lt.add(p * neg_log(prefix / canon_lt));
        }
    }

    let mut canon_mass: HashMap<&[u32], NeumaierSum> = HashMap::new();
    for ((_, p), wb) in support.iter().zip(&canon) {
        canon_mass.entry(wb.as_slice()).or_default().add(*p);
    }
    let mut keys: Vec<&[u32]> = canon_mass.keys().copied().collect();
    keys.sort_unstable();
    let h_wbar: NeumaierSum = keys
        .iter()
        .map(|k| {
            let q = canon_mass[k].value();
            q * neg_log(q)
        })
        .collect();

    let h_cond_leq = h_leq.value();
    let h_cond_lt = h_lt.value();
    Ok(ExactReport {
        h_w: h_w.value(),
        h_wbar: h_wbar.value(),
        h_w_given_wbar: h_w_given_wbar.value(),
        h_kappa: h_kappa.value(),
        h_cond_leq,
        h_cond_lt,
        mi: h_cond_lt - h_cond_leq,
    })
}

/// Information available when choosing between a symbol and its twin.
#[derive(Debug, Clone, Copy)]
pub struct ChoiceContext {
    /// Zero-based position in the sequence.
    pub position: usize,
    /// The base symbol being emitted.
    pub symbol: u32,
    /// The previous base symbol, `None` at the start.
    pub prev: Option<u32>,
    /// The following base symbol; always present since eos is never duplicated.
    pub next: u32,
}

/// How the probability of emitting the twin depends on its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ContextRule {
    /// Same probability everywhere.
    Constant { p: f64 },
    /// Indexed by position modulo the table length.
    Position { table: Vec<f64> },
    /// Indexed by the previous base symbol; the last entry is used at the
    /// start of a sequence.
    PreviousSymbol { table: Vec<f64> },
    /// Indexed by the following base symbol.
    NextSymbol { table: Vec<f64> },
}

impl ContextRule {
    pub fn twin_prob(&self, ctx: &ChoiceContext) -> f64 {
        match self {
            ContextRule::Constant { p } => *p,
            ContextRule::Position { table } => table[ctx.position % table.len()],
            ContextRule::PreviousSymbol { table } => match ctx.prev {
                Some(s) => table[s as usize],
                None => table[table.len() - 1],
            },
            ContextRule::NextSymbol { table } => table[ctx.next as usize],
        }
    }

    fn check(&self, base_len: usize) -> Result<(), TheoryError> {
        let (table, need): (&[f64], usize) = match self {
            ContextRule::Constant { p } => (std::slice::from_ref(p), 1),
            ContextRule::Position { table } => (table, table.len().max(1)),
            ContextRule::PreviousSymbol { table } => (table, base_len + 1),
            ContextRule::NextSymbol { table } => (table, base_len),
        };
        if table.len() != need {
            return Err(TheoryError::Invalid(format!(
                "context table has {} entries, expected {need}",
                table.len()
            )));
        }
        if table.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(TheoryError::Invalid("twin probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Splits each base sequence's mass over its duplicated variants. At every
/// position holding a duplicated symbol, `twin_prob` gives the chance of the
/// twin, independently across positions given the base sequence.
pub fn duplicate_with<F>(base: &DistSpec, scheme: &DupScheme, twin_prob: F) -> Result<DistSpec, TheoryError>
where
    F: Fn(&ChoiceContext) -> f64,
{
    if base.vocab.content_hash() != scheme.base_vocab().content_hash() {
        return Err(TheoryError::VocabMismatch);
    }
    let support = base.enumerate()?;
    let size: f64 = support
        .iter()
        .map(|(s, _)| 2f64.powi(s.iter().filter(|&&id| scheme.prime_of(id).is_some()).count() as i32))
        .sum();
    if size > ENUMERATION_LIMIT {
        return Err(TheoryError::TooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::new();
    for (seq, p) in &support {
        let mut partial: Vec<(Vec<u32>, f64)> = vec![(Vec::with_capacity(seq.len()), *p)];
        for (t, &id) in seq.iter().enumerate() {
            match scheme.prime_of(id) {
                None => partial.iter_mut().for_each(|(s, _)| s.push(id)),
                Some(prime) => {
                    let ctx = ChoiceContext {
                        position: t,
                        symbol: id,
                        prev: t.checked_sub(1).map(|u| seq[u]),
                        next: seq[t + 1],
                    };
                    let q = twin_prob(&ctx);
                    let mut next = Vec::with_capacity(partial.len() * 2);
                    for (s, m) in partial {
                        if q < 1.0 {
                            let mut a = s.clone();
                            a.push(id);
                            next.push((a, m * (1.0 - q)));
                        }
                        if q > 0.0 {
                            let mut b = s;
                            b.push(prime);
                            next.push((b, m * q));
                        }
                    }
                    partial = next;
                }
            }
        }
        out.extend(partial.into_iter().filter(|(_, m)| *m > 0.0));
    }
    DistSpec::explicit(scheme.dup_vocab().clone(), out, base.max_len)
}

/// The perfect-duplication construction: twins chosen i.i.d. per position
/// with the scheme's choice probabilities.
pub fn make_perfect_duplication(base: &DistSpec, scheme: &DupScheme) -> Result<DistSpec, TheoryError> {
    duplicate_with(base, scheme, |ctx| scheme.choice_prob(ctx.symbol))
}

/// Duplication whose twin choice depends on the surrounding base symbols.
///
/// Only rules that look ahead (`NextSymbol`) can create mutual information
/// between past twins and the next base symbol; choices driven by the past
/// alone leave it at zero.
pub fn make_context_dependent_duplication(
    base: &DistSpec,
    scheme: &DupScheme,
    rule: &ContextRule,
) -> Result<DistSpec, TheoryError> {
    rule.check(base.vocab.len())?;
    duplicate_with(base, scheme, |ctx| rule.twin_prob(ctx))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().copied().collect::<NeumaierSum>().value();
    exps.into_iter().map(|e| e / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest gap between grouped softmax mass over the full output matrix and
/// the softmax over one representative row per group.
///
/// The representative is the first member of each group; its logit gets a
/// `ln |group|` offset so the comparison is exact when all rows of a group
/// coincide, whatever the mix of duplicated and plain symbols.
pub fn collapse_deviation(hidden: &[Vec<f64>], embeddings: &[Vec<f64>], groups: &[Vec<usize>]) -> f64 {
    let mut worst = 0.0f64;
    for h in hidden {
        let full: Vec<f64> = embeddings.iter().map(|e| dot(e, h)).collect();
        let p_full = softmax(&full);
        let reduced: Vec<f64> = groups
            .iter()
            .map(|g| dot(&embeddings[g[0]], h) + (g.len() as f64).ln())
            .collect();
        let p_reduced = softmax(&reduced);
        for (g, q) in groups.iter().zip(&p_reduced) {
            let summed: f64 = g.iter().map(|&i| p_full[i]).sum();
            worst = worst.max((summed - q).abs());
        }
    }
    worst
}

/// Builds the duplicated output matrix by copying each base row to its twin
/// and reports the collapse deviation.
pub fn softmax_collapse_check(hidden: &[Vec<f64>], base_embeddings: &[Vec<f64>], scheme: &DupScheme) -> f64 {
    let mut rows = base_embeddings.to_vec();
    let mut groups: Vec<Vec<usize>> = (0..base_embeddings.len()).map(|i| vec![i]).collect();
    for (b, p) in scheme.twin_pairs() {
        debug_assert_eq!(p as usize, rows.len());
        rows.push(base_embeddings[b as usize].clone());
        groups[b as usize].push(p as usize);
    }
    collapse_deviation(hidden, &rows, &groups)
}

/// What a verification case is expected to show beyond the two identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseKind {
    /// Any map; only the chain rule and the decomposition are checked.
    General,
    /// i.i.d. twin choice: zero mutual information, `H_κ = H(W̄)`.
    Perfect,
    /// Look-ahead twin choice: positive mutual information, `H_κ < H(W̄)`.
    ContextDependent,
}

pub struct TheoryCase {
    pub name: String,
    pub kind: CaseKind,
    pub dist: DistSpec,
    pub map: DedupMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub name: String,
    pub kind: CaseKind,
    pub report: ExactReport,
    pub chain_rule_residual: f64,
    pub lemma_residual: f64,
    pub failures: Vec<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Tolerances used by [`check_case`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseTolerance {
    pub identity: f64,
    /// Bound on MI and on `|H_κ − H(W̄)|` for perfect duplication.
    pub perfect: f64,
    /// Minimum MI for context-dependent duplication.
    pub min_mi: f64,
}

impl Default for CaseTolerance {
    fn default() -> Self {
        Self {
            identity: 1e-9,
            perfect: 1e-10,
            min_mi: 1e-6,
        }
    }
}

pub fn check_case(case: &TheoryCase, tol: &CaseTolerance) -> Result<CaseOutcome, TheoryError> {
    let r = exact_quantities(&case.dist, &case.map)?;
    let mut failures = Vec::new();
    let chain = r.chain_rule_residual();
    let lemma = r.lemma_residual();
    if !(chain.abs() <= tol.identity) {
        failures.push(format!("chain rule residual {chain:e}"));
    }
    if !(lemma.abs() <= tol.identity) {
        failures.push(format!("decomposition residual {lemma:e}"));
    }
    match case.kind {
        CaseKind::General => {}
        CaseKind::Perfect => {
            if !(r.mi.abs() <= tol.perfect) {
                failures.push(format!("MI {:e} above {:e}", r.mi, tol.perfect));
            }
            if !((r.h_kappa - r.h_wbar).abs() <= tol.perfect) {
                failures.push(format!("|H_kappa - H(Wbar)| = {:e}", (r.h_kappa - r.h_wbar).abs()));
            }
        }
        CaseKind::ContextDependent => {
            if !(r.mi > tol.min_mi) {
                failures.push(format!("MI {:e} not above {:e}", r.mi, tol.min_mi));
            }
            if !(r.h_kappa < r.h_wbar) {
                failures.push(format!("H_kappa {} not below H(Wbar) {}", r.h_kappa, r.h_wbar));
            }
        }
    }
    Ok(CaseOutcome {
        name: case.name.clone(),
        kind: case.kind,
        report: r,
        chain_rule_residual: chain,
        lemma_residual: lemma,
        failures,
    })
}

fn small_vocab(entries: &[&str]) -> Arc<Vocabulary> {
    let entries = entries.iter().map(|s| s.to_string()).collect();
    Arc::new(Vocabulary::from_entries(entries, 0).expect("fixture vocabulary"))
}

fn random_row<R: rand::Rng>(rng: &mut R, n: usize, eos_floor: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    w[0] += eos_floor;
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Random Markov source over `vocab` with an absorbing eos at id 0.
fn random_markov<R: rand::Rng>(rng: &mut R, vocab: Arc<Vocabulary>, max_len: usize) -> DistSpec {
    let n = vocab.len();
    let initial = random_row(rng, n, 0.0);
    let mut transition = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            let mut row = vec![0.0; n];
            row[0] = 1.0;
            transition.push(row);
        } else {
            transition.push(random_row(rng, n, 0.3));
        }
    }
    DistSpec::markov(vocab, initial, transition, max_len).expect("normalized rows")
}

/// A seeded random case with at most six symbols and length at most six.
/// The kind cycles with the seed.
pub fn random_case(seed: u64) -> TheoryCase {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let max_len = rng.random_range(3..=6);
    let kind = match seed % 3 {
        0 => CaseKind::General,
        1 => CaseKind::Perfect,
        _ => CaseKind::ContextDependent,
    };
    if kind == CaseKind::General {
        let v = small_vocab(&["<eos>", "\u{2581}the", "the", "The", "cats", "cat"]);
        let dist = random_markov(&mut rng, v.clone(), max_len);
        let rule = [Rule::Space, Rule::Lower, Rule::Plural, Rule::All][rng.random_range(0..4)];
        let map = build_kappa(v, rule);
        return TheoryCase {
            name: format!("random-{seed}-general-{}", rule.name()),
            kind,
            dist,
            map,
        };
    }
    let base_len = rng.random_range(2..=4);
    let names = ["<eos>", "a", "b", "c"];
    let base = small_vocab(&names[..base_len]);
    let room = (6 - base_len).min(base_len - 1);
    let k = rng.random_range(1..=room);
    let mut ids: Vec<u32> = (1..base_len as u32).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    ids.truncate(k);
    let (mut scheme, map) = build_dup_for_ids(base.clone(), &ids, 0.5).expect("valid ids");
    for &id in &ids {
        scheme
            .set_choice_prob(id, rng.random_range(0.1..0.9))
            .expect("in range");
    }
    let dist = random_markov(&mut rng, base.clone(), max_len);
    let dup = if kind == CaseKind::Perfect {
        make_perfect_duplication(&dist, &scheme)
    } else {
        let table = (0..base_len).map(|_| rng.random_range(0.05..0.95)).collect();
        make_context_dependent_duplication(&dist, &scheme, &ContextRule::NextSymbol { table })
    }
    .expect("small enumeration");
    TheoryCase {
        name: format!(
            "random-{seed}-{}",
            if kind == CaseKind::Perfect {
                "perfect"
            } else {
                "context"
            }
        ),
        kind,
        dist: dup,
        map,
    }
}

/// Hand-made cases shipped with the toolkit.
pub fn bundled_cases() -> Vec<TheoryCase> {
    let mut out = Vec::new();
    // Two-state source over {eos, A}: "A eos" and "A A eos" equally likely.
    let v = small_vocab(&["<eos>", "A"]);
    let base = DistSpec::explicit(v.clone(), vec![(vec![1, 0], 0.5), (vec![1, 1, 0], 0.5)], 3).expect("normalized");
    let (scheme, map) = build_dup_for_ids(v.clone(), &[1], 0.5).expect("valid ids");
    out.push(TheoryCase {
        name: "two-lengths-perfect".into(),
        kind: CaseKind::Perfect,
        dist: make_perfect_duplication(&base, &scheme).expect("small"),
        map: map.clone(),
    });
    out.push(TheoryCase {
        name: "two-lengths-identity".into(),
        kind: CaseKind::Perfect,
        dist: base,
        map: DedupMap::identity(v),
    });

    // Markov source over {eos, a, b}; a′ chosen exactly when b follows.
    let v = small_vocab(&["<eos>", "a", "b"]);
    let base = DistSpec::markov(
        v.clone(),
        vec![0.0, 0.5, 0.5],
        vec![vec![1.0, 0.0, 0.0], vec![0.2, 0.4, 0.4], vec![0.2, 0.4, 0.4]],
        5,
    )
    .expect("normalized");
    let (scheme, map) = build_dup_for_ids(v.clone(), &[1], 0.5).expect("valid ids");
    out.push(TheoryCase {
        name: "markov-perfect".into(),
        kind: CaseKind::Perfect,
        dist: make_perfect_duplication(&base, &scheme).expect("small"),
        map: map.clone(),
    });
    let rule = ContextRule::NextSymbol {
        table: vec![0.0, 0.0, 1.0],
    };
    out.push(TheoryCase {
        name: "markov-next-symbol".into(),
        kind: CaseKind::ContextDependent,
        dist: make_context_dependent_duplication(&base, &scheme, &rule).expect("small"),
        map,
    });

    // Parity source: the twin marks whether an even number of symbols
    // precede it, which the previous twins already reveal.
    let (scheme, map) = build_dup_for_ids(v.clone(), &[1, 2], 0.5).expect("valid ids");
    let rule = ContextRule::Position { table: vec![0.1, 0.9] };
    out.push(TheoryCase {
        name: "markov-parity".into(),
        kind: CaseKind::General,
        dist: make_context_dependent_duplication(&base, &scheme, &rule).expect("small"),
        map,
    });

    // Natural near-duplicates merged by every rule.
    let v = small_vocab(&["<eos>", "\u{2581}Books", "book", "Book", "\u{2581}book"]);
    let base = DistSpec::markov(
        v.clone(),
        vec![0.0, 0.25, 0.25, 0.25, 0.25],
        vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.4, 0.1, 0.2, 0.1, 0.2],
            vec![0.3, 0.3, 0.1, 0.2, 0.1],
            vec![0.5, 0.1, 0.1, 0.1, 0.2],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
        ],
        4,
    )
    .expect("normalized");
    out.push(TheoryCase {
        name: "books-all".into(),
        kind: CaseKind::General,
        dist: base,
        map: build_kappa(v, Rule::All),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(entries: &[&str]) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_entries(entries.iter().map(|s| s.to_string()).collect(), 0).unwrap())
    }

    #[test]
    fn bundled_and_random_cases_pass() {
        let tol = CaseTolerance::default();
        for case in bundled_cases()
            .iter()
            .chain((0..30).map(random_case).collect::<Vec<_>>().iter())
        {
            let out = check_case(case, &tol).unwrap();
            assert!(out.passed(), "{}: {:?}", out.name, out.failures);
        }
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn point_mass_has_zero_entropy() {
        let v = vocab(&["<eos>", "a"]);
        let d = DistSpec::explicit(v.clone(), vec![(vec![1, 1, 0], 1.0)], 3).unwrap();
        let r = exact_quantities(&d, &DedupMap::identity(v)).unwrap();
        for x in [
            r.h_w,
            r.h_wbar,
            r.h_w_given_wbar,
            r.h_kappa,
            r.h_cond_leq,
            r.h_cond_lt,
            r.mi,
        ] {
            assert!(x.abs() < 1e-15, "{r:?}");
        }
    }

    #[test]
    fn markov_truncates_at_max_len() {
        let v = vocab(&["<eos>", "a"]);
        let d = DistSpec::markov(v, vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.5, 0.5]], 3).unwrap();
        let s = d.enumerate().unwrap();
        let expect = vec![(vec![0], 0.5), (vec![1, 0], 0.25), (vec![1, 1, 0], 0.25)];
        assert_eq!(s, expect);
    }

    #[test]
    fn rejects_bad_distributions() {
        let v = vocab(&["<eos>", "a"]);
        assert!(matches!(
            DistSpec::explicit(v.clone(), vec![(vec![0], 0.7)], 2),
            Err(TheoryError::Unnormalized { .. })
        ));
        assert!(DistSpec::explicit(v.clone(), vec![(vec![0, 1, 0], 1.0)], 3).is_err());
        assert!(DistSpec::explicit(v.clone(), vec![(vec![1], 1.0)], 3).is_err());
        let big = vocab(&["<eos>", "a", "b", "c", "d", "e", "f", "g", "h", "i"]);
        let uniform = vec![0.1; 10];
        let d = DistSpec::markov(big, uniform.clone(), vec![uniform; 10], 8).unwrap();
        assert!(matches!(d.enumerate(), Err(TheoryError::TooLarge { .. })));
    }

    #[test]
    fn json_round_trip() {
        let v = vocab(&["<eos>", "a", "b"]);
        let d = DistSpec::markov(
            v,
            vec![0.2, 0.5, 0.3],
            vec![vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.4], vec![0.5, 0.5, 0.0]],
            4,
        )
        .unwrap();
        let back = DistSpec::from_json(&d.to_json()).unwrap();
        assert_eq!(back.kind, d.kind);
        let e = d.to_explicit().unwrap();
        let back = DistSpec::from_json(&e.to_json()).unwrap();
        assert_eq!(back.enumerate().unwrap(), d.enumerate().unwrap());
    }

    // Σ̄ = {eos, A}; sequences "A eos" and "A A eos" uniformly, then A is
    // duplicated. Brute force by hand:
    //   H(W̄) = ln 2.
    //   Perfect duplication at 1/2 gives H(W) = ln 2 + 1.5 ln 2 = 2.5 ln 2.
    #[test]
    fn perfect_duplication_matches_hand_computation() {
        let v = vocab(&["<eos>", "A"]);
        let base = DistSpec::explicit(v.clone(), vec![(vec![1, 0], 0.5), (vec![1, 1, 0], 0.5)], 3).unwrap();
        let (scheme, map) = build_dup_for_ids(v, &[1], 0.5).unwrap();
        let dup = make_perfect_duplication(&base, &scheme).unwrap();
        let r = exact_quantities(&dup, &map).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((r.h_wbar - ln2).abs() < 1e-12);
        assert!((r.h_w - 2.5 * ln2).abs() < 1e-12);
        assert!((r.h_w_given_wbar - 1.5 * ln2).abs() < 1e-12);
        assert!(r.mi.abs() < 1e-12);
        assert!((r.h_kappa - r.h_wbar).abs() < 1e-12);
    }

    #[test]
    fn full_choice_is_a_relabeling() {
        let v = vocab(&["<eos>", "a", "b"]);
        let base = DistSpec::markov(
            v.clone(),
            vec![0.1, 0.6, 0.3],
            vec![vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.4], vec![0.5, 0.25, 0.25]],
            5,
        )
        .unwrap();
        let (scheme, map) = build_dup_for_ids(v, &[1, 2], 1.0).unwrap();
        let r = exact_quantities(&make_perfect_duplication(&base, &scheme).unwrap(), &map).unwrap();
        assert!((r.h_w - r.h_wbar).abs() < 1e-12);
        assert!(r.h_w_given_wbar.abs() < 1e-12);
    }

    #[test]
    fn next_symbol_rule_creates_information() {
        let v = vocab(&["<eos>", "a", "b"]);
        let base = DistSpec::markov(
            v.clone(),
            vec![0.0, 0.5, 0.5],
            vec![vec![1.0, 0.0, 0.0], vec![0.2, 0.4, 0.4], vec![0.2, 0.4, 0.4]],
            5,
        )
        .unwrap();
        let (scheme, map) = build_dup_for_ids(v, &[1], 0.5).unwrap();
        // a′ exactly when b follows
        let rule = ContextRule::NextSymbol {
            table: vec![0.0, 0.0, 1.0],
        };
        let d = make_context_dependent_duplication(&base, &scheme, &rule).unwrap();
        let r = exact_quantities(&d, &map).unwrap();
        assert!(r.mi > 1e-3, "{r:?}");
        assert!(r.h_kappa < r.h_wbar - 1e-3);
        assert!(r.lemma_residual().abs() < 1e-12);

        // looking backwards never helps predict the next base symbol
        let rule = ContextRule::PreviousSymbol {
            table: vec![0.0, 0.9, 0.1, 0.5],
        };
        let d = make_context_dependent_duplication(&base, &scheme, &rule).unwrap();
        let r = exact_quantities(&d, &map).unwrap();
        assert!(r.mi.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn context_tables_are_checked() {
        let v = vocab(&["<eos>", "a"]);
        let base = DistSpec::explicit(v.clone(), vec![(vec![1, 0], 1.0)], 2).unwrap();
        let (scheme, _) = build_dup_for_ids(v, &[1], 0.5).unwrap();
        let rule = ContextRule::NextSymbol { table: vec![0.5] };
        assert!(make_context_dependent_duplication(&base, &scheme, &rule).is_err());
        let rule = ContextRule::Constant { p: 1.5 };
        assert!(make_context_dependent_duplication(&base, &scheme, &rule).is_err());
    }

    #[test]
    fn collapse_identity_and_perturbation() {
        let v = vocab(&["<eos>", "a", "b", "c"]);
        let (scheme, _) = build_dup_for_ids(v, &[1, 3], 0.5).unwrap();
        let base: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect())
            .collect();
        let hidden: Vec<Vec<f64>> = (0..20)
            .map(|i| (0..5).map(|j| ((i * 13 + j * 5) % 17) as f64 / 4.0 - 2.0).collect())
            .collect();
        assert!(softmax_collapse_check(&hidden, &base, &scheme) <= 1e-12);

        let mut rows = base.clone();
        rows.push(base[1].iter().map(|x| x + 1e-3).collect());
        rows.push(base[3].clone());
        let groups = vec![vec![0], vec![1, 4], vec![2], vec![3, 5]];
        assert!(collapse_deviation(&hidden, &rows, &groups) > 0.0);
    }

    #[test]
    fn single_pair_splits_evenly() {
        let rows = vec![vec![0.3, -1.2], vec![0.3, -1.2]];
        let h = vec![vec![2.0, 5.0]];
        let p = softmax(&rows.iter().map(|e| dot(e, &h[0])).collect::<Vec<_>>());
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(collapse_deviation(&h, &rows, &[vec![0, 1]]) <= 1e-15);
    }

    fn arb_markov() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        let row = || proptest::collection::vec(0.0f64..1.0, 4);
        (row(), proptest::collection::vec(row(), 4)).prop_map(|(init, rows)| {
            let norm = |r: Vec<f64>| {
                let r: Vec<f64> = r.into_iter().map(|x| x + 0.01).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            (norm(init), rows.into_iter().map(norm).collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn identities_hold_for_rule_maps((init, trans) in arb_markov(), len in 2usize..6) {
            let v = vocab(&["<eos>", "cat", "Cat", "cats"]);
            let d = DistSpec::markov(v.clone(), init, trans, len).unwrap();
            for rule in [Rule::Lower, Rule::Plural, Rule::All] {
                let r = exact_quantities(&d, &build_kappa(v.clone(), rule)).unwrap();
                prop_assert!(r.lemma_residual().abs() <= 1e-9);
                prop_assert!(r.chain_rule_residual().abs() <= 1e-9);
                prop_assert!(r.mi >= -1e-10);
                prop_assert!(r.h_wbar <= r.h_w + 1e-9);
                for x in [r.h_w, r.h_wbar, r.h_kappa, r.h_cond_leq, r.h_cond_lt] {
                    prop_assert!(x >= -1e-12);
                }
            }
        }

        #[test]
        fn perfect_duplication_has_no_information(
            (init, trans) in arb_markov(),
            len in 2usize..5,
            p in 0.0f64..=1.0,
        ) {
            let v = vocab(&["<eos>", "x", "y", "z"]);
            let base = DistSpec::markov(v.clone(), init, trans, len).unwrap();
            let (scheme, map) = build_dup_for_ids(v, &[1, 3], p).unwrap();
            let r = exact_quantities(&make_perfect_duplication(&base, &scheme).unwrap(), &map).unwrap();
            prop_assert!(r.mi.abs() <= 1e-10);
            prop_assert!((r.h_kappa - r.h_wbar).abs() <= 1e-10);
            prop_assert!(r.chain_rule_residual().abs() <= 1e-9);
        }
    }
}
