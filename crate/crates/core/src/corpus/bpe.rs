//! Greedy byte-pair encoding with `▁` for spaces and byte fallback.
//!
//! The base alphabet is eos, the 256 byte pieces `<0x00>`..`<0xFF>`, and every
//! non-control character seen in training (a space is represented by `▁`).
//! Characters outside the alphabet, and literal `▁` characters in the input,
//! are written as byte pieces, so encoding is total and `decode(encode(t)) == t`.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use super::{io_err, CorpusError, TokenStream};
use crate::vocab::{Vocabulary, DEFAULT_EOS, METASYMBOL};

type Pair = (u32, u32);

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    vocab: Arc<Vocabulary>,
    merges: Vec<(String, String)>,
    ranks: HashMap<Pair, (u32, u32)>,
    char_ids: HashMap<char, u32>,
    byte_ids: Vec<u32>,
    is_byte: Vec<bool>,
}

fn byte_piece(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn in_alphabet(c: char) -> bool {
    c != METASYMBOL && !c.is_control()
}

/// Splits text into pieces: a new piece starts at every space, and runs of
/// newlines form their own pieces.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_newline = false;
    for (i, c) in text.char_indices() {
        let newline = c == '\n' || c == '\r';
        let boundary = i > start && (c == ' ' || newline != prev_newline);
        if boundary {
            out.push(&text[start..i]);
            start = i;
        }
        prev_newline = newline;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl BpeTokenizer {
    /// Rebuilds a tokenizer from its vocabulary and ordered merge list.
    pub fn from_parts(vocab: Arc<Vocabulary>, merges: Vec<(String, String)>) -> Result<Self, CorpusError> {
        let mut byte_ids = Vec::with_capacity(256);
        for b in 0..=255u8 {
            let id = vocab
                .id_of(&byte_piece(b))
                .ok_or_else(|| CorpusError::IncompleteTokenizer(byte_piece(b)))?;
            byte_ids.push(id);
        }
        let mut is_byte = vec![false; vocab.len()];
        for &id in &byte_ids {
            is_byte[id as usize] = true;
        }
        let mut char_ids = HashMap::new();
        for (id, e) in vocab.entries().iter().enumerate() {
            let mut cs = e.chars();
            if let (Some(c), None) = (cs.next(), cs.next()) {
                if id as u32 != vocab.eos_id() && (in_alphabet(c) || c == METASYMBOL) {
                    char_ids.insert(c, id as u32);
                }
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let missing = |s: &str| CorpusError::IncompleteTokenizer(format!("merge symbol {s:?}"));
            let a = vocab.id_of(l).ok_or_else(|| missing(l))?;
            let b = vocab.id_of(r).ok_or_else(|| missing(r))?;
            let merged = format!("{l}{r}");
            let m = vocab.id_of(&merged).ok_or_else(|| missing(&merged))?;
            ranks.entry((a, b)).or_insert((rank as u32, m));
        }
        Ok(Self {
            vocab,
            merges,
            ranks,
            char_ids,
            byte_ids,
            is_byte,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn initial_symbols(&self, piece: &str, out: &mut Vec<u32>) {
        for c in piece.chars() {
            let key = if c == ' ' { METASYMBOL } else { c };
            match self.char_ids.get(&key) {
                Some(&id) if c == ' ' || in_alphabet(c) => out.push(id),
                _ => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        out.push(self.byte_ids[b as usize]);
                    }
                }
            }
        }
    }

    fn encode_piece(&self, piece: &str) -> Vec<u32> {
        let mut syms = Vec::with_capacity(piece.len());
        self.initial_symbols(piece, &mut syms);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, (w[0], w[1]), m)))
                .min_by_key(|&(r, _, _)| r);
            let Some((_, pair, merged)) = best else { break };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    /// Token ids of one document, without the trailing eos.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut cache = HashMap::new();
        self.encode_text_cached(text, &mut cache)
    }

    fn encode_text_cached(&self, text: &str, cache: &mut HashMap<String, Vec<u32>>) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() / 3 + 1);
        for p in pieces(text) {
            if let Some(hit) = cache.get(p) {
                ids.extend_from_slice(hit);
                continue;
            }
            let enc = self.encode_piece(p);
            ids.extend_from_slice(&enc);
            cache.insert(p.to_string(), enc);
        }
        ids
    }

    /// Encodes each document and appends eos after it.
    pub fn encode<S: AsRef<str>>(&self, docs: &[S]) -> TokenStream {
        let mut cache = HashMap::new();
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(docs.len());
        for d in docs {
            offsets.push(ids.len() as u64);
            ids.extend(self.encode_text_cached(d.as_ref(), &mut cache));
            ids.push(self.vocab.eos_id());
        }
        TokenStream::from_raw(ids, offsets, &self.vocab).expect("encoder emits valid streams")
    }

    /// Text of a token sequence; eos tokens are dropped.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len() * 4);
        let mut buf = [0u8; 4];
        for &id in ids {
            if id == self.vocab.eos_id() {
                continue;
            }
            if self.is_byte[id as usize] {
                let s = self.vocab.surface(id);
                let b = u8::from_str_radix(&s[3..5], 16).expect("byte piece");
                bytes.push(b);
            } else {
                for c in self.vocab.surface(id).chars() {
                    let c = if c == METASYMBOL { ' ' } else { c };
                    bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// One string per document.
    pub fn decode(&self, stream: &TokenStream) -> Vec<String> {
        stream.documents().map(|d| self.decode_ids(d)).collect()
    }

    pub fn merges_to_string(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(&escape(l));
            out.push('\t');
            out.push_str(&escape(r));
            out.push('\n');
        }
        out
    }

    pub fn save_merges(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.merges_to_string()).map_err(io_err(path))
    }

    pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>, CorpusError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let (l, r) = line.split_once('\t').ok_or(CorpusError::BadMerge {
                    line: i + 1,
                    reason: "expected two tab-separated symbols".into(),
                })?;
                let bad = |reason: String| CorpusError::BadMerge { line: i + 1, reason };
                Ok((
                    unescape(l).map_err(bad)?,
                    unescape(r).map_err(|e| CorpusError::BadMerge { line: i + 1, reason: e })?,
                ))
            })
            .collect()
    }

    pub fn load_merges(path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_merges(&text)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape {other:?}")),
        }
    }
    Ok(out)
}

struct Word {
    syms: Vec<u32>,
    freq: i64,
}

impl Word {
    fn pairs(&self, usable: &[bool]) -> impl Iterator<Item = Pair> + '_ {
        let usable = usable.to_vec();
        self.syms
            .windows(2)
            .map(|w| (w[0], w[1]))
            .filter(move |&(a, b)| usable[a as usize] && usable[b as usize])
    }
}

/// Learns merges greedily until the vocabulary has `target_size` entries or
/// no pair occurs at least twice.
///
/// Ties in pair frequency go to the lexicographically smallest merged
/// string, then to the smallest left symbol.
pub fn train_bpe<S: AsRef<str>>(docs: &[S], target_size: usize) -> Result<BpeTokenizer, CorpusError> {
    let mut piece_freq: HashMap<&str, i64> = HashMap::new();
    let mut chars = HashSet::new();
    for d in docs {
        for p in pieces(d.as_ref()) {
            *piece_freq.entry(p).or_insert(0) += 1;
        }
        for c in d.as_ref().chars() {
            if c == ' ' {
                chars.insert(METASYMBOL);
            } else if in_alphabet(c) {
                chars.insert(c);
            }
        }
    }
    if piece_freq.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut chars: Vec<char> = chars.into_iter().collect();
    chars.sort_unstable();

    let mut entries = vec![DEFAULT_EOS.to_string()];
    entries.extend((0..=255u8).map(byte_piece));
    entries.extend(chars.iter().map(|c| c.to_string()));
    let base = entries.len();
    if target_size <= base {
        return Err(CorpusError::TargetTooSmall {
            target: target_size,
            base,
        });
    }
    let seed_vocab = Arc::new(Vocabulary::from_entries(entries.clone(), 0)?);
    let seed = BpeTokenizer::from_parts(seed_vocab, Vec::new())?;

    // merges only ever join text symbols
    let mut usable: Vec<bool> = vec![false; base];
    for u in usable.iter_mut().skip(257) {
        *u = true;
    }
    let mut index: HashMap<String, u32> = entries.iter().enumerate().map(|(i, e)| (e.clone(), i as u32)).collect();

    let mut piece_list: Vec<(&str, i64)> = piece_freq.into_iter().collect();
    piece_list.sort_unstable();
    let mut words: Vec<Word> = piece_list
        .iter()
        .map(|&(p, freq)| {
            let mut syms = Vec::new();
            seed.initial_symbols(p, &mut syms);
            Word { syms, freq }
        })
        .collect();

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.pairs(&usable) {
            *counts.entry(p).or_insert(0) += w.freq;
            where_.entry(p).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    let mut forbidden: HashSet<Pair> = HashSet::new();
    while entries.len() < target_size {
        let mut best: Option<(i64, Pair, String)> = None;
        for (&pair, &c) in &counts {
            if c < 2 || forbidden.contains(&pair) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bc, bp, bs)) => {
                    if c != *bc {
                        c > *bc
                    } else {
                        let s = format!("{}{}", entries[pair.0 as usize], entries[pair.1 as usize]);
                        (&s, &entries[pair.0 as usize]) < (bs, &entries[bp.0 as usize])
                    }
                }
            };
            if better {
                let s = format!("{}{}", entries[pair.0 as usize], entries[pair.1 as usize]);
                best = Some((c, pair, s));
            }
        }
        let Some((_, pair, merged)) = best else { break };
        if crate::vocab::is_byte_piece(&merged) {
            forbidden.insert(pair);
            continue;
        }
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                entries.push(merged.clone());
                usable.push(true);
                index.insert(merged.clone(), (entries.len() - 1) as u32);
                (entries.len() - 1) as u32
            }
        };
        merges.push((entries[pair.0 as usize].clone(), entries[pair.1 as usize].clone()));

        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let w = &words[wi];
            for p in w.pairs(&usable) {
                if let Some(c) = counts.get_mut(&p) {
                    *c -= w.freq;
                }
            }
            let mut out = Vec::with_capacity(w.syms.len());
            let mut i = 0;
            while i < w.syms.len() {
                if i + 1 < w.syms.len() && (w.syms[i], w.syms[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(w.syms[i]);
                    i += 1;
                }
            }
            words[wi].syms = out;
            let w = &words[wi];
            for p in w.pairs(&usable) {
                *counts.entry(p).or_insert(0) += w.freq;
                where_.entry(p).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }

    let vocab = Arc::new(Vocabulary::from_entries(entries, 0)?);
    BpeTokenizer::from_parts(vocab, merges)
}
