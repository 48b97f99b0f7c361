//! Deduplication mappings κ: Σ → Σ̄.
//!
//! Natural mappings are defined by string rules (`space`, `lower`, `plural`,
//! and their composition `all`); synthetic mappings come from duplicating a
//! base vocabulary and sending every twin back to its base symbol.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::{BitOr, BitOrAssign};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::vocab::{VocabError, Vocabulary, METASYMBOL};

/// Suffix appended to a base surface to name its synthetic twin.
pub const TWIN_SUFFIX: char = '\u{2032}';

/// Minimum non-whitespace length (including the `s`) for the plural rule.
pub const PLURAL_MIN_CHARS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum KappaError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfUnitInterval { name: &'static str, value: f64 },
    #[error("map was built for vocabulary {expected:016x}, got {found:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("malformed map file: {0}")]
    Malformed(String),
    #[error("invalid assignment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// A deduplication rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Identity,
    Space,
    Lower,
    Plural,
    All,
}

impl Rule {
    pub const NATURAL: [Rule; 4] = [Rule::Space, Rule::Lower, Rule::Plural, Rule::All];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Identity => "identity",
            Rule::Space => "space",
            Rule::Lower => "lower",
            Rule::Plural => "plural",
            Rule::All => "all",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Rule::Identity),
            "space" => Ok(Rule::Space),
            "lower" => Ok(Rule::Lower),
            "plural" => Ok(Rule::Plural),
            "all" => Ok(Rule::All),
            other => Err(format!("unknown rule {other:?}")),
        }
    }
}

/// Per-id provenance: which rules changed the surface. Four bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleFlags(u8);

impl RuleFlags {
    pub const NONE: RuleFlags = RuleFlags(0);
    pub const SPACE: RuleFlags = RuleFlags(1);
    pub const LOWER: RuleFlags = RuleFlags(2);
    pub const PLURAL: RuleFlags = RuleFlags(4);
    /// Synthetic twin of a base symbol.
    pub const TWIN: RuleFlags = RuleFlags(8);

    pub fn from_bits(bits: u8) -> Self {
        RuleFlags(bits & 0x0f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: RuleFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for RuleFlags {
    type Output = RuleFlags;

    fn bitor(self, rhs: RuleFlags) -> RuleFlags {
        RuleFlags(self.0 | rhs.0)
    }
}

impl BitOrAssign for RuleFlags {
    fn bitor_assign(&mut self, rhs: RuleFlags) {
        self.0 |= rhs.0;
    }
}

fn is_space(c: char) -> bool {
    c == METASYMBOL || c.is_whitespace()
}

/// Strips leading and trailing whitespace markers. Entries that are nothing
/// but whitespace are left as they are.
pub fn space_key(s: &str) -> &str {
    let t = s.trim_matches(is_space);
    if t.is_empty() {
        s
    } else {
        t
    }
}

/// Unicode simple lowercase mapping, one char to one char.
pub fn lower_key(s: &str) -> String {
    s.chars().map(|c| c.to_lowercase().next().unwrap_or(c)).collect()
}

/// Drops one trailing `s` when the entry has at least four characters that
/// are not whitespace markers.
pub fn plural_key(s: &str) -> &str {
    if !s.ends_with('s') {
        return s;
    }
    let visible = s.chars().filter(|&c| !is_space(c)).count();
    if visible >= PLURAL_MIN_CHARS {
        &s[..s.len() - 1]
    } else {
        s
    }
}

/// Canonical key of `surface` under `rule`.
pub fn canonical_key(surface: &str, rule: Rule) -> String {
    canonical_key_with_flags(surface, rule).0
}

/// Canonical key plus the flags of every sub-rule that changed the string.
pub fn canonical_key_with_flags(surface: &str, rule: Rule) -> (String, RuleFlags) {
    let mut flags = RuleFlags::NONE;
    let mut step = |s: String, f: &dyn Fn(&str) -> String, flag: RuleFlags| {
        let t = f(&s);
        if t != s {
            flags |= flag;
        }
        t
    };
    let space = |s: &str| space_key(s).to_string();
    let lower = |s: &str| lower_key(s);
    let plural = |s: &str| plural_key(s).to_string();
    let s = surface.to_string();
    let key = match rule {
        Rule::Identity => s,
        Rule::Space => step(s, &space, RuleFlags::SPACE),
        Rule::Lower => step(s, &lower, RuleFlags::LOWER),
        Rule::Plural => step(s, &plural, RuleFlags::PLURAL),
        Rule::All => {
            let s = step(s, &space, RuleFlags::SPACE);
            let s = step(s, &lower, RuleFlags::LOWER);
            step(s, &plural, RuleFlags::PLURAL)
        }
    };
    (key, flags)
}

/// A surjective map from source ids to canonical symbols.
#[derive(Clone)]
pub struct DedupMap {
    source: Arc<Vocabulary>,
    label: String,
    canonical_keys: Vec<String>,
    kappa_of: Vec<u32>,
    provenance: Vec<RuleFlags>,
    is_canonical: Vec<bool>,
    members: Vec<Vec<u32>>,
}

impl fmt::Debug for DedupMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DedupMap")
            .field("label", &self.label)
            .field("source_len", &self.source.len())
            .field("canonical_len", &self.canonical_keys.len())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    format: String,
    version: u32,
    label: String,
    vocab_hash: String,
    vocab_len: usize,
    canonical_keys: Vec<String>,
    kappa_of: Vec<u32>,
    provenance: Vec<u8>,
    is_canonical: Vec<bool>,
}

const MAP_FORMAT: &str = "neardup-dedup-map";

impl DedupMap {
    /// Validates and assembles a map from an explicit assignment.
    pub fn from_assignment(
        source: Arc<Vocabulary>,
        label: impl Into<String>,
        canonical_keys: Vec<String>,
        kappa_of: Vec<u32>,
        provenance: Vec<RuleFlags>,
        is_canonical: Vec<bool>,
    ) -> Result<Self, KappaError> {
        let n = source.len();
        if kappa_of.len() != n || provenance.len() != n || is_canonical.len() != n {
            return Err(KappaError::Invalid(format!("per-id arrays must have length {n}")));
        }
        let mut members = vec![Vec::new(); canonical_keys.len()];
        for (id, &c) in kappa_of.iter().enumerate() {
            let slot = members
                .get_mut(c as usize)
                .ok_or_else(|| KappaError::Invalid(format!("id {id} maps to missing canonical index {c}")))?;
            slot.push(id as u32);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(KappaError::Invalid(format!("canonical index {c} has no preimage")));
        }
        let eos = source.eos_id();
        if members[kappa_of[eos as usize] as usize].len() != 1 {
            return Err(KappaError::Invalid("eos shares its group".into()));
        }
        Ok(Self {
            source,
            label: label.into(),
            canonical_keys,
            kappa_of,
            provenance,
            is_canonical,
            members,
        })
    }

    /// κ = identity.
    pub fn identity(vocab: Arc<Vocabulary>) -> Self {
        build_kappa(vocab, Rule::Identity)
    }

    pub fn source_vocab(&self) -> &Arc<Vocabulary> {
        &self.source
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source_len(&self) -> usize {
        self.kappa_of.len()
    }

    pub fn canonical_len(&self) -> usize {
        self.canonical_keys.len()
    }

    pub fn canonical_keys(&self) -> &[String] {
        &self.canonical_keys
    }

    pub fn kappa(&self, id: u32) -> u32 {
        self.kappa_of[id as usize]
    }

    pub fn kappa_table(&self) -> &[u32] {
        &self.kappa_of
    }

    pub fn provenance(&self, id: u32) -> RuleFlags {
        self.provenance[id as usize]
    }

    pub fn is_canonical(&self, id: u32) -> bool {
        self.is_canonical[id as usize]
    }

    /// Source ids in canonical group `c`, ascending.
    pub fn members(&self, c: u32) -> &[u32] {
        &self.members[c as usize]
    }

    pub fn groups(&self) -> &[Vec<u32>] {
        &self.members
    }

    pub fn is_identity(&self) -> bool {
        self.canonical_keys.len() == self.kappa_of.len()
    }

    /// `(|Σ̄|, |Σ|)`, the exact terms of the near-duplicate rate.
    pub fn rate_terms(&self) -> (usize, usize) {
        (self.canonical_len(), self.source_len())
    }

    /// `1 − |Σ̄|/|Σ|`.
    pub fn near_duplicate_rate(&self) -> f64 {
        let (c, n) = self.rate_terms();
        1.0 - c as f64 / n as f64
    }

    /// Pairs `(representative, other)` for every multi-member group. The
    /// representative is the canonical member when there is one, else the
    /// smallest id.
    pub fn duplicate_pairs(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for group in &self.members {
            if group.len() < 2 {
                continue;
            }
            let rep = group
                .iter()
                .copied()
                .find(|&id| self.is_canonical(id))
                .unwrap_or(group[0]);
            out.extend(group.iter().copied().filter(|&id| id != rep).map(|id| (rep, id)));
        }
        out
    }

    /// Vocabulary over canonical symbols. Key strings that collide (only
    /// possible between forced singletons and rule groups) get twin suffixes.
    pub fn canonical_vocab(&self) -> Result<Vocabulary, VocabError> {
        let mut seen = HashSet::with_capacity(self.canonical_keys.len());
        let mut entries = Vec::with_capacity(self.canonical_keys.len());
        for key in &self.canonical_keys {
            let mut k = key.clone();
            while !seen.insert(k.clone()) {
                k.push(TWIN_SUFFIX);
            }
            entries.push(k);
        }
        let opaque = self
            .members
            .iter()
            .map(|g| g.iter().all(|&id| self.source.is_opaque(id)))
            .collect();
        let eos = self.kappa(self.source.eos_id());
        Vocabulary::from_parts(entries, opaque, self.source.marker(), eos)
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            format: MAP_FORMAT.into(),
            version: 1,
            label: self.label.clone(),
            vocab_hash: format!("{:016x}", self.source.content_hash()),
            vocab_len: self.source.len(),
            canonical_keys: self.canonical_keys.clone(),
            kappa_of: self.kappa_of.clone(),
            provenance: self.provenance.iter().map(|f| f.bits()).collect(),
            is_canonical: self.is_canonical.clone(),
        };
        serde_json::to_string(&file).expect("map serializes")
    }

    pub fn from_json(text: &str, vocab: Arc<Vocabulary>) -> Result<Self, KappaError> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| KappaError::Malformed(e.to_string()))?;
        if file.format != MAP_FORMAT {
            return Err(KappaError::Malformed(format!("format {:?}", file.format)));
        }
        let found = vocab.content_hash();
        if file.vocab_hash != format!("{found:016x}") {
            let expected = u64::from_str_radix(&file.vocab_hash, 16).unwrap_or(0);
            return Err(KappaError::VocabMismatch { expected, found });
        }
        Self::from_assignment(
            vocab,
            file.label,
            file.canonical_keys,
            file.kappa_of,
            file.provenance.into_iter().map(RuleFlags::from_bits).collect(),
            file.is_canonical,
        )
    }
}

/// Groups the vocabulary by canonical key under `rule`.
///
/// Eos and opaque entries are always singletons keyed by their own surface.
/// Canonical indices are assigned in order of first occurrence, so the
/// identity rule maps every id to itself.
pub fn build_kappa(vocab: Arc<Vocabulary>, rule: Rule) -> DedupMap {
    let eos = vocab.eos_id();
    let keyed: Vec<(String, RuleFlags, bool)> = (0..vocab.len() as u32)
        .into_par_iter()
        .map(|id| {
            let surface = vocab.surface(id);
            if id == eos || vocab.is_opaque(id) {
                (surface.to_string(), RuleFlags::NONE, false)
            } else {
                let (k, f) = canonical_key_with_flags(surface, rule);
                (k, f, true)
            }
        })
        .collect();

    let mut index: HashMap<&str, u32> = HashMap::new();
    let mut keys = Vec::new();
    let mut kappa_of = Vec::with_capacity(keyed.len());
    for (key, _, eligible) in &keyed {
        let c = if *eligible {
            *index.entry(key.as_str()).or_insert_with(|| {
                keys.push(key.clone());
                (keys.len() - 1) as u32
            })
        } else {
            keys.push(key.clone());
            (keys.len() - 1) as u32
        };
        kappa_of.push(c);
    }
    let provenance = keyed.iter().map(|(_, f, _)| *f).collect();
    let is_canonical = keyed
        .iter()
        .enumerate()
        .map(|(id, (k, _, _))| vocab.surface(id as u32) == k)
        .collect();
    DedupMap::from_assignment(vocab, rule.name(), keys, kappa_of, provenance, is_canonical)
        .expect("rule grouping is a valid partition")
}

/// A base vocabulary with a subset of its symbols duplicated.
#[derive(Clone)]
pub struct DupScheme {
    base: Arc<Vocabulary>,
    dup: Arc<Vocabulary>,
    prime_of: Vec<Option<u32>>,
    choice_prob: Vec<f64>,
    fraction: f64,
    seed: u64,
}

impl fmt::Debug for DupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DupScheme")
            .field("base_len", &self.base.len())
            .field("dup_len", &self.dup.len())
            .field("fraction", &self.fraction)
            .field("seed", &self.seed)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct SchemeFile {
    format: String,
    version: u32,
    base_vocab_hash: String,
    dup_vocab_hash: String,
    fraction: f64,
    seed: u64,
    /// `[base id, primed id]`
    prime_of: Vec<[u32; 2]>,
    choice_prob: Vec<f64>,
}

const SCHEME_FORMAT: &str = "neardup-dup-scheme";

impl DupScheme {
    pub fn base_vocab(&self) -> &Arc<Vocabulary> {
        &self.base
    }

    pub fn dup_vocab(&self) -> &Arc<Vocabulary> {
        &self.dup
    }

    pub fn prime_of(&self, base_id: u32) -> Option<u32> {
        self.prime_of[base_id as usize]
    }

    pub fn prime_table(&self) -> &[Option<u32>] {
        &self.prime_of
    }

    /// p(w′ | w̄) for a base id; zero for ids without a twin.
    pub fn choice_prob(&self, base_id: u32) -> f64 {
        self.choice_prob[base_id as usize]
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn duplicated_count(&self) -> usize {
        self.prime_of.iter().flatten().count()
    }

    /// `(base, prime)` pairs in base-id order.
    pub fn twin_pairs(&self) -> Vec<(u32, u32)> {
        self.prime_of
            .iter()
            .enumerate()
            .filter_map(|(b, p)| p.map(|p| (b as u32, p)))
            .collect()
    }

    /// Overrides p(w′ | w̄) for one duplicated base id.
    pub fn set_choice_prob(&mut self, base_id: u32, p: f64) -> Result<(), KappaError> {
        check_unit("choice_p", p)?;
        if self.prime_of[base_id as usize].is_none() {
            return Err(KappaError::Invalid(format!("base id {base_id} has no twin")));
        }
        self.choice_prob[base_id as usize] = p;
        Ok(())
    }

    /// The map sending each twin to its base symbol.
    pub fn dedup_map(&self) -> DedupMap {
        let n_base = self.base.len();
        let n = self.dup.len();
        let mut kappa_of: Vec<u32> = (0..n_base as u32).collect();
        kappa_of.resize(n, 0);
        let mut provenance = vec![RuleFlags::NONE; n];
        let mut is_canonical = vec![true; n];
        for (b, p) in self.twin_pairs() {
            kappa_of[p as usize] = b;
            provenance[p as usize] = RuleFlags::TWIN;
            is_canonical[p as usize] = false;
        }
        DedupMap::from_assignment(
            self.dup.clone(),
            format!("dup-{}", self.fraction),
            self.base.entries().to_vec(),
            kappa_of,
            provenance,
            is_canonical,
        )
        .expect("twin assignment is a valid partition")
    }

    pub fn to_json(&self) -> String {
        let pairs = self.twin_pairs();
        let file = SchemeFile {
            format: SCHEME_FORMAT.into(),
            version: 1,
            base_vocab_hash: format!("{:016x}", self.base.content_hash()),
            dup_vocab_hash: format!("{:016x}", self.dup.content_hash()),
            fraction: self.fraction,
            seed: self.seed,
            choice_prob: pairs.iter().map(|&(b, _)| self.choice_prob(b)).collect(),
            prime_of: pairs.iter().map(|&(b, p)| [b, p]).collect(),
        };
        serde_json::to_string(&file).expect("scheme serializes")
    }

    pub fn from_json(text: &str, base: Arc<Vocabulary>) -> Result<Self, KappaError> {
        let file: SchemeFile = serde_json::from_str(text).map_err(|e| KappaError::Malformed(e.to_string()))?;
        if file.format != SCHEME_FORMAT {
            return Err(KappaError::Malformed(format!("format {:?}", file.format)));
        }
        let found = base.content_hash();
        if file.base_vocab_hash != format!("{found:016x}") {
            let expected = u64::from_str_radix(&file.base_vocab_hash, 16).unwrap_or(0);
            return Err(KappaError::VocabMismatch { expected, found });
        }
        if file.choice_prob.len() != file.prime_of.len() {
            return Err(KappaError::Malformed("choice_prob length".into()));
        }
        let mut selected: Vec<u32> = file.prime_of.iter().map(|p| p[0]).collect();
        selected.sort_unstable();
        let mut scheme = assemble_scheme(base, &selected, 0.0, file.fraction, file.seed)?;
        for (pair, p) in file.prime_of.iter().zip(&file.choice_prob) {
            if scheme.prime_of(pair[0]) != Some(pair[1]) {
                return Err(KappaError::Malformed(format!(
                    "twin of {} recorded as {}",
                    pair[0], pair[1]
                )));
            }
            scheme.set_choice_prob(pair[0], *p)?;
        }
        if file.dup_vocab_hash != format!("{:016x}", scheme.dup.content_hash()) {
            return Err(KappaError::Malformed("dup vocabulary hash differs".into()));
        }
        Ok(scheme)
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), KappaError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(KappaError::OutOfUnitInterval { name, value })
    }
}

/// Duplicates a seeded uniform-random `fraction` of the non-eos base symbols.
///
/// Twins are appended after the base ids, in base-id order, and named by
/// suffixing `′` to the base surface.
pub fn build_synthetic_dup(
    base: Arc<Vocabulary>,
    fraction: f64,
    choice_p: f64,
    seed: u64,
) -> Result<(DupScheme, DedupMap), KappaError> {
    check_unit("fraction", fraction)?;
    check_unit("choice_p", choice_p)?;
    let eos = base.eos_id();
    let candidates: Vec<u32> = (0..base.len() as u32).filter(|&id| id != eos).collect();
    let k = (fraction * candidates.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<u32> = rand::seq::index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    selected.sort_unstable();
    let scheme = assemble_scheme(base, &selected, choice_p, fraction, seed)?;
    let map = scheme.dedup_map();
    Ok((scheme, map))
}

/// Duplicates exactly the listed base ids (sorted, eos excluded).
pub fn build_dup_for_ids(
    base: Arc<Vocabulary>,
    ids: &[u32],
    choice_p: f64,
) -> Result<(DupScheme, DedupMap), KappaError> {
    check_unit("choice_p", choice_p)?;
    let mut selected = ids.to_vec();
    selected.sort_unstable();
    selected.dedup();
    if selected.contains(&base.eos_id()) {
        return Err(KappaError::Invalid("eos cannot be duplicated".into()));
    }
    let fraction = selected.len() as f64 / (base.len().saturating_sub(1)).max(1) as f64;
    let scheme = assemble_scheme(base, &selected, choice_p, fraction, 0)?;
    let map = scheme.dedup_map();
    Ok((scheme, map))
}

fn assemble_scheme(
    base: Arc<Vocabulary>,
    selected: &[u32],
    choice_p: f64,
    fraction: f64,
    seed: u64,
) -> Result<DupScheme, KappaError> {
    let n = base.len();
    let mut entries = base.entries().to_vec();
    let mut opaque = base.opaque_mask().to_vec();
    let mut taken: HashSet<String> = entries.iter().cloned().collect();
    let mut prime_of = vec![None; n];
    let mut choice_prob = vec![0.0; n];
    for &b in selected {
        if b as usize >= n {
            return Err(KappaError::Invalid(format!("base id {b} out of range")));
        }
        let mut name = base.surface(b).to_string();
        name.push(TWIN_SUFFIX);
        while taken.contains(&name) {
            name.push(TWIN_SUFFIX);
        }
        taken.insert(name.clone());
        prime_of[b as usize] = Some(entries.len() as u32);
        choice_prob[b as usize] = choice_p;
        entries.push(name);
        opaque.push(base.is_opaque(b));
    }
    let dup = Vocabulary::from_parts(entries, opaque, base.marker(), base.eos_id())?;
    Ok(DupScheme {
        base,
        dup: Arc::new(dup),
        prime_of,
        choice_prob,
        fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(entries: &[&str]) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_entries(entries.iter().map(|s| s.to_string()).collect(), 0).unwrap())
    }

    #[test]
    fn rule_examples() {
        assert_eq!(canonical_key("▁the", Rule::Space), "the");
        assert_eq!(canonical_key("Now", Rule::Lower), "now");
        assert_eq!(canonical_key("▁individuals", Rule::Plural), "▁individual");
        assert_eq!(canonical_key("▁Books", Rule::All), "book");
        assert_eq!(canonical_key("gas", Rule::Plural), "gas");
        assert_eq!(canonical_key("▁gas", Rule::Plural), "▁gas");
        assert_eq!(canonical_key("gass", Rule::Plural), "gas");
        assert_eq!(canonical_key("the▁", Rule::Space), "the");
        assert_eq!(canonical_key("BOOKS", Rule::Plural), "BOOKS");
        assert_eq!(canonical_key("BOOKS", Rule::All), "book");
    }

    #[test]
    fn whitespace_only_entries_keep_their_surface() {
        assert_eq!(canonical_key("▁", Rule::Space), "▁");
        assert_eq!(canonical_key("▁▁", Rule::All), "▁▁");
        let m = build_kappa(vocab(&["<eos>", "▁", "▁▁", "a"]), Rule::Space);
        assert_eq!(m.canonical_len(), 4);
    }

    #[test]
    fn simple_lowercase_is_one_to_one() {
        // full lowercase of U+0130 would be two chars
        assert_eq!(lower_key("\u{130}stanbul"), "istanbul");
        assert_eq!(lower_key("ΣΑΣ"), "σασ");
    }

    #[test]
    fn all_flags_record_each_step() {
        let (k, f) = canonical_key_with_flags("▁Books", Rule::All);
        assert_eq!(k, "book");
        assert!(f.contains(RuleFlags::SPACE | RuleFlags::LOWER | RuleFlags::PLURAL));
        let (_, f) = canonical_key_with_flags("the", Rule::All);
        assert!(f.is_empty());
    }

    #[test]
    fn identity_map_is_all_singletons() {
        let v = vocab(&["<eos>", "the", "▁the", "The"]);
        let m = build_kappa(v, Rule::Identity);
        assert!(m.is_identity());
        assert_eq!(m.near_duplicate_rate(), 0.0);
        for id in 0..4 {
            assert_eq!(m.kappa(id), id);
            assert!(m.is_canonical(id));
        }
    }

    #[test]
    fn space_rule_groups_and_rate() {
        let m = build_kappa(vocab(&["<eos>", "the", "▁the"]), Rule::Space);
        assert_eq!(m.canonical_len(), 2);
        assert_eq!(m.members(m.kappa(1)), &[1, 2]);
        assert_eq!(m.members(m.kappa(0)), &[0]);
        assert!((m.near_duplicate_rate() - (1.0 - 2.0 / 3.0)).abs() < 1e-15);
        assert!(m.is_canonical(1));
        assert!(!m.is_canonical(2));
        assert_eq!(m.duplicate_pairs(), vec![(1, 2)]);
    }

    #[test]
    fn eos_is_never_merged() {
        let v = Arc::new(Vocabulary::from_entries(vec!["a".into(), "<EOS>".into(), "<eos>".into()], 2).unwrap());
        let m = build_kappa(v, Rule::Lower);
        assert_eq!(m.members(m.kappa(2)), &[2]);
        // the colliding key is disambiguated in the canonical vocabulary
        let cv = m.canonical_vocab().unwrap();
        assert_eq!(cv.len(), 3);
        assert_eq!(cv.eos_id(), m.kappa(2));
    }

    #[test]
    fn map_json_round_trip_and_mismatch() {
        let v = vocab(&["<eos>", "▁Cats", "cat", "dog"]);
        let m = build_kappa(v.clone(), Rule::All);
        let back = DedupMap::from_json(&m.to_json(), v).unwrap();
        assert_eq!(back.kappa_table(), m.kappa_table());
        assert_eq!(back.canonical_keys(), m.canonical_keys());
        let other = vocab(&["<eos>", "x"]);
        assert!(matches!(
            DedupMap::from_json(&m.to_json(), other),
            Err(KappaError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_dup_zero_fraction_is_identity() {
        let v = vocab(&["<eos>", "a", "b"]);
        let (s, m) = build_synthetic_dup(v.clone(), 0.0, 0.5, 1).unwrap();
        assert_eq!(**s.dup_vocab(), *v);
        assert!(m.is_identity());
    }

    #[test]
    fn synthetic_dup_full_fraction_skips_eos() {
        let entries: Vec<String> = std::iter::once("<eos>".to_string())
            .chain((1..16).map(|i| format!("w{i}")))
            .collect();
        let v = Arc::new(Vocabulary::from_entries(entries, 0).unwrap());
        let (s, m) = build_synthetic_dup(v, 1.0, 0.5, 3).unwrap();
        assert_eq!(s.dup_vocab().len(), 31);
        assert_eq!(s.prime_of(0), None);
        assert_eq!(m.canonical_len(), 16);
        assert_eq!(s.dup_vocab().surface(s.prime_of(1).unwrap()), "w1′");
    }

    #[test]
    fn synthetic_dup_half_of_1001() {
        let entries: Vec<String> = std::iter::once("<eos>".to_string())
            .chain((1..1001).map(|i| format!("t{i}")))
            .collect();
        let v = Arc::new(Vocabulary::from_entries(entries, 0).unwrap());
        let (s1, _) = build_synthetic_dup(v.clone(), 0.5, 0.5, 42).unwrap();
        let (s2, _) = build_synthetic_dup(v.clone(), 0.5, 0.5, 42).unwrap();
        let (s3, _) = build_synthetic_dup(v, 0.5, 0.5, 43).unwrap();
        assert_eq!(s1.dup_vocab().len(), 1501);
        assert_eq!(s1.twin_pairs(), s2.twin_pairs());
        assert_ne!(s1.twin_pairs(), s3.twin_pairs());
    }

    #[test]
    fn synthetic_dup_rejects_bad_probabilities() {
        let v = vocab(&["<eos>", "a"]);
        assert!(build_synthetic_dup(v.clone(), 1.5, 0.5, 0).is_err());
        assert!(build_synthetic_dup(v, 0.5, -0.1, 0).is_err());
    }

    #[test]
    fn twin_names_avoid_existing_entries() {
        let v = vocab(&["<eos>", "a", "a′"]);
        let (s, _) = build_dup_for_ids(v, &[1], 0.5).unwrap();
        assert_eq!(s.dup_vocab().surface(s.prime_of(1).unwrap()), "a′′");
    }

    #[test]
    fn scheme_json_round_trip() {
        let entries: Vec<String> = std::iter::once("<eos>".to_string())
            .chain((1..50).map(|i| format!("t{i}")))
            .collect();
        let v = Arc::new(Vocabulary::from_entries(entries, 0).unwrap());
        let (mut s, _) = build_synthetic_dup(v.clone(), 0.4, 0.5, 9).unwrap();
        let b = s.twin_pairs()[0].0;
        s.set_choice_prob(b, 0.25).unwrap();
        let back = DupScheme::from_json(&s.to_json(), v).unwrap();
        assert_eq!(back.twin_pairs(), s.twin_pairs());
        assert_eq!(back.choice_prob(b), 0.25);
        assert_eq!(**back.dup_vocab(), **s.dup_vocab());
    }

    #[test]
    fn dup_map_canonical_vocab_is_base() {
        let v = vocab(&["<eos>", "a", "b", "c"]);
        let (_, m) = build_synthetic_dup(v.clone(), 1.0, 0.5, 0).unwrap();
        assert_eq!(m.canonical_vocab().unwrap(), *v);
    }

    #[test]
    fn fraction_rate_identity() {
        let entries: Vec<String> = std::iter::once("<eos>".to_string())
            .chain((1..=1000).map(|i| format!("t{i}")))
            .collect();
        let v = Arc::new(Vocabulary::from_entries(entries, 0).unwrap());
        for f in [0.1, 0.4, 0.7, 1.0] {
            let (_, m) = build_synthetic_dup(v.clone(), f, 0.5, 5).unwrap();
            // eos never duplicated: f is over 1000 of the 1001 symbols
            let expect = f * 1000.0 / (1001.0 + f * 1000.0);
            assert!((m.near_duplicate_rate() - expect).abs() < 1e-12);
            assert!((m.near_duplicate_rate() - f / (1.0 + f)).abs() < 1e-3);
        }
    }

    fn surface_strategy() -> impl Strategy<Value = String> {
        proptest::string::string_regex("▁?[a-cA-C]{1,5}s?▁?").unwrap()
    }

    proptest! {
        #[test]
        fn groups_match_pairwise_oracle(
            raw in proptest::collection::hash_set(surface_strategy(), 1..50),
            rule_ix in 0usize..5,
        ) {
            let rule = [Rule::Identity, Rule::Space, Rule::Lower, Rule::Plural, Rule::All][rule_ix];
            let mut entries = vec!["<eos>".to_string()];
            entries.extend(raw);
            let v = Arc::new(Vocabulary::from_entries(entries.clone(), 0).unwrap());
            let m = build_kappa(v, rule);
            let n = entries.len();
            for i in 1..n {
                for j in 1..n {
                    let same = canonical_key(&entries[i], rule) == canonical_key(&entries[j], rule);
                    prop_assert_eq!(m.kappa(i as u32) == m.kappa(j as u32), same);
                }
                prop_assert_ne!(m.kappa(0), m.kappa(i as u32));
            }
            // partition
            let mut seen = vec![0u32; n];
            for g in m.groups() {
                for &id in g { seen[id as usize] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let (c, total) = m.rate_terms();
            prop_assert_eq!(m.near_duplicate_rate(), 1.0 - c as f64 / total as f64);
        }

        #[test]
        fn all_is_composition(s in surface_strategy()) {
            let composed = plural_key(&lower_key(space_key(&s))).to_string();
            prop_assert_eq!(canonical_key(&s, Rule::All), composed);
        }
    }
}
