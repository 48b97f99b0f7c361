//! Subword vocabularies.
//!
//! Every surface string is held in one canonical whitespace convention: a
//! space is written as the metasymbol `▁` (U+2581). Files exported with the
//! byte-level convention (`Ġ` for space) or with literal spaces are converted
//! on load and converted back on save, so `load(save(v)) == v`.
//!
//! Entries that cannot be read as text (raw byte fragments, SentencePiece
//! `<0xNN>` byte-fallback pieces) are kept verbatim and flagged *opaque*.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The whitespace metasymbol used internally.
pub const METASYMBOL: char = '\u{2581}';

/// Surface strings recognised as end-of-sequence, in priority order.
pub const EOS_CANDIDATES: &[&str] = &["<eos>", "</s>", "<|endoftext|>", "<|eos|>", "<EOS>"];

/// Surface string used when an eos entry has to be appended.
pub const DEFAULT_EOS: &str = "<eos>";

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate surface string {surface:?} at ids {first} and {second}")]
    DuplicateSurface { surface: String, first: u32, second: u32 },
    #[error("no end-of-sequence entry found (pass an explicit eos or enable append_eos)")]
    MissingEos,
    #[error("eos entry {0:?} is not in the vocabulary")]
    UnknownEos(String),
    #[error("entry {0} is empty")]
    EmptyEntry(u32),
    #[error("malformed {format} input at line {line}: {reason}")]
    Malformed {
        format: VocabFormat,
        line: usize,
        reason: String,
    },
    #[error("json-map ids must be exactly 0..{len}; {reason}")]
    BadIds { len: usize, reason: String },
    #[error("entry {id} ({surface:?}) cannot be written as {format}")]
    Unrepresentable {
        id: u32,
        surface: String,
        format: VocabFormat,
    },
    #[error("id {id} out of range for vocabulary of size {len}")]
    IdOutOfRange { id: u32, len: usize },
}

/// Whitespace-marker convention of an exported vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Marker {
    /// SentencePiece style `▁`.
    Metasymbol,
    /// GPT-2 byte-level alphabet, where a space byte prints as `Ġ`.
    ByteLevel,
    /// Plain spaces.
    LiteralSpace,
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Marker::Metasymbol => "metasymbol",
            Marker::ByteLevel => "byte-level",
            Marker::LiteralSpace => "literal-space",
        })
    }
}

impl FromStr for Marker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metasymbol" => Ok(Marker::Metasymbol),
            "byte-level" => Ok(Marker::ByteLevel),
            "literal-space" => Ok(Marker::LiteralSpace),
            other => Err(format!("unknown marker {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabFormat {
    /// One entry per line, line index is the id.
    PlainLines,
    /// `surface<TAB>score` rows, row index is the id.
    SentencepieceTsv,
    /// JSON object of surface to id, plus an optional top-level `"eos"` string.
    JsonMap,
}

impl fmt::Display for VocabFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabFormat::PlainLines => "plain-lines",
            VocabFormat::SentencepieceTsv => "sentencepiece-tsv",
            VocabFormat::JsonMap => "json-map",
        })
    }
}

impl FromStr for VocabFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain-lines" => Ok(VocabFormat::PlainLines),
            "sentencepiece-tsv" => Ok(VocabFormat::SentencepieceTsv),
            "json-map" => Ok(VocabFormat::JsonMap),
            other => Err(format!("unknown vocabulary format {other:?}")),
        }
    }
}

/// Options for [`Vocabulary::load`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Force a marker convention instead of auto-detecting it.
    pub marker: Option<Marker>,
    /// Surface string of the eos entry (in file convention).
    pub eos: Option<String>,
    /// Append [`DEFAULT_EOS`] when no eos entry is found.
    pub append_eos: bool,
}

/// An immutable, ordered set of subwords with dense ids.
#[derive(Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    opaque: Vec<bool>,
    index: HashMap<String, u32>,
    marker: Marker,
    eos_id: u32,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.opaque == other.opaque
            && self.marker == other.marker
            && self.eos_id == other.eos_id
    }
}

impl Eq for Vocabulary {}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("len", &self.entries.len())
            .field("marker", &self.marker)
            .field("eos_id", &self.eos_id)
            .finish()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from entries already in `▁` form.
    ///
    /// SentencePiece byte-fallback pieces (`<0xNN>`) are flagged opaque.
    pub fn from_entries(entries: Vec<String>, eos_id: u32) -> Result<Self, VocabError> {
        let opaque = entries.iter().map(|e| is_byte_piece(e)).collect();
        Self::from_parts(entries, opaque, Marker::Metasymbol, eos_id)
    }

    /// Builds a vocabulary from normalized entries and an explicit opaque mask.
    pub fn from_parts(
        entries: Vec<String>,
        opaque: Vec<bool>,
        marker: Marker,
        eos_id: u32,
    ) -> Result<Self, VocabError> {
        assert_eq!(entries.len(), opaque.len(), "opaque mask length");
        if eos_id as usize >= entries.len() {
            return Err(VocabError::IdOutOfRange {
                id: eos_id,
                len: entries.len(),
            });
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (id, e) in entries.iter().enumerate() {
            if e.is_empty() {
                return Err(VocabError::EmptyEntry(id as u32));
            }
            if let Some(first) = index.insert(e.clone(), id as u32) {
                return Err(VocabError::DuplicateSurface {
                    surface: e.clone(),
                    first,
                    second: id as u32,
                });
            }
        }
        Ok(Self {
            entries,
            opaque,
            index,
            marker,
            eos_id,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// Normalized surface of `id`. Panics when out of range.
    pub fn surface(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn get(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    pub fn is_opaque(&self, id: u32) -> bool {
        self.opaque[id as usize]
    }

    pub fn opaque_mask(&self) -> &[bool] {
        &self.opaque
    }

    pub fn marker(&self) -> Marker {
        self.marker
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    /// Same entries, different export convention.
    pub fn with_marker(mut self, marker: Marker) -> Self {
        self.marker = marker;
        self
    }

    /// Stable 64-bit content hash over entries, opaque flags and eos id.
    ///
    /// The marker is an export detail and does not participate.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"neardup-vocab-v1");
        h.update((self.entries.len() as u64).to_le_bytes());
        h.update(self.eos_id.to_le_bytes());
        for (e, &o) in self.entries.iter().zip(&self.opaque) {
            h.update((e.len() as u64).to_le_bytes());
            h.update(e.as_bytes());
            h.update([o as u8]);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn load(path: impl AsRef<Path>, format: VocabFormat, opts: &LoadOptions) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, format, opts)
    }

    pub fn parse(text: &str, format: VocabFormat, opts: &LoadOptions) -> Result<Self, VocabError> {
        let (raw, json_eos) = match format {
            VocabFormat::PlainLines => (parse_lines(text), None),
            VocabFormat::SentencepieceTsv => (parse_tsv(text)?, None),
            VocabFormat::JsonMap => parse_json_map(text)?,
        };
        let marker = opts.marker.unwrap_or_else(|| detect_marker(&raw));
        let mut entries = Vec::with_capacity(raw.len() + 1);
        let mut opaque = Vec::with_capacity(raw.len() + 1);
        for r in &raw {
            let (text, op) = normalize(r, marker);
            entries.push(text);
            opaque.push(op);
        }

        let eos_name = opts.eos.clone().or(json_eos);
        let eos_id = match eos_name {
            Some(name) => {
                let pos = raw.iter().position(|r| *r == name);
                match pos {
                    Some(p) => p as u32,
                    None if opts.append_eos => append(&mut entries, &mut opaque, name),
                    None => return Err(VocabError::UnknownEos(name)),
                }
            }
            None => {
                let found = EOS_CANDIDATES.iter().find_map(|c| raw.iter().position(|r| r == c));
                match found {
                    Some(p) => p as u32,
                    None if opts.append_eos => append(&mut entries, &mut opaque, DEFAULT_EOS.to_string()),
                    None => return Err(VocabError::MissingEos),
                }
            }
        };
        Self::from_parts(entries, opaque, marker, eos_id)
    }

    /// Serializes in `format`, converting back to this vocabulary's marker.
    pub fn to_format_string(&self, format: VocabFormat) -> Result<String, VocabError> {
        let mut out = String::new();
        match format {
            VocabFormat::PlainLines | VocabFormat::SentencepieceTsv => {
                for (id, _) in self.entries.iter().enumerate() {
                    let s = self.export_surface(id as u32);
                    let bad = s.contains('\n')
                        || s.contains('\r')
                        || (format == VocabFormat::SentencepieceTsv && s.contains('\t'));
                    if bad {
                        return Err(VocabError::Unrepresentable {
                            id: id as u32,
                            surface: s,
                            format,
                        });
                    }
                    out.push_str(&s);
                    if format == VocabFormat::SentencepieceTsv {
                        out.push_str("\t0");
                    }
                    out.push('\n');
                }
            }
            VocabFormat::JsonMap => {
                out.push_str("{\n");
                // The eos key is omitted when "eos" is itself an entry; the
                // reader then falls back to auto-detection.
                let mut first = true;
                if self.id_of("eos").is_none() {
                    let eos = self.export_surface(self.eos_id);
                    out.push_str("  \"eos\": ");
                    out.push_str(&serde_json::to_string(&eos).expect("string serializes"));
                    first = false;
                }
                for id in 0..self.entries.len() {
                    out.push_str(if first { "  " } else { ",\n  " });
                    first = false;
                    let s = self.export_surface(id as u32);
                    out.push_str(&serde_json::to_string(&s).expect("string serializes"));
                    out.push_str(": ");
                    out.push_str(&id.to_string());
                }
                out.push_str("\n}\n");
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>, format: VocabFormat) -> Result<(), VocabError> {
        let path = path.as_ref();
        let text = self.to_format_string(format)?;
        std::fs::write(path, text).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Surface of `id` in this vocabulary's export convention.
    pub fn export_surface(&self, id: u32) -> String {
        let s = &self.entries[id as usize];
        if self.opaque[id as usize] {
            if self.marker == Marker::ByteLevel {
                if let Some(bytes) = parse_byte_pieces(s) {
                    let enc = byte_encoder();
                    return bytes.iter().map(|&b| enc[b as usize]).collect();
                }
            }
            return s.clone();
        }
        denormalize(s, self.marker)
    }
}

fn parse_byte_pieces(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || !s.len().is_multiple_of(6) {
        return None;
    }
    (0..s.len())
        .step_by(6)
        .map(|i| {
            let piece = s.get(i..i + 6)?;
            if !is_byte_piece(piece) {
                return None;
            }
            u8::from_str_radix(&piece[3..5], 16).ok()
        })
        .collect()
}

fn append(entries: &mut Vec<String>, opaque: &mut Vec<bool>, name: String) -> u32 {
    entries.push(name);
    opaque.push(false);
    (entries.len() - 1) as u32
}

fn parse_lines(text: &str) -> Vec<String> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Vec::new();
    }
    body.split('\n').map(str::to_string).collect()
}

fn parse_tsv(text: &str) -> Result<Vec<String>, VocabError> {
    parse_lines(text)
        .into_iter()
        .enumerate()
        .map(|(i, line)| match line.rsplit_once('\t') {
            Some((surface, _score)) => Ok(surface.to_string()),
            None => Err(VocabError::Malformed {
                format: VocabFormat::SentencepieceTsv,
                line: i + 1,
                reason: "missing tab-separated score".into(),
            }),
        })
        .collect()
}

fn parse_json_map(text: &str) -> Result<(Vec<String>, Option<String>), VocabError> {
    let malformed = |reason: String| VocabError::Malformed {
        format: VocabFormat::JsonMap,
        line: 1,
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("top level is not an object".into()))?;
    let mut eos = None;
    let mut pairs = Vec::with_capacity(obj.len());
    for (k, v) in obj {
        if k == "eos" {
            if let Some(s) = v.as_str() {
                eos = Some(s.to_string());
                continue;
            }
        }
        let id = v
            .as_u64()
            .ok_or_else(|| malformed(format!("id of {k:?} is not a non-negative integer")))?;
        pairs.push((id, k.clone()));
    }
    let len = pairs.len();
    let mut slots: Vec<Option<String>> = vec![None; len];
    for (id, k) in pairs {
        let slot = slots.get_mut(id as usize).ok_or_else(|| VocabError::BadIds {
            len,
            reason: format!("id {id} of {k:?} is out of range"),
        })?;
        if slot.is_some() {
            return Err(VocabError::BadIds {
                len,
                reason: format!("id {id} assigned twice"),
            });
        }
        *slot = Some(k);
    }
    let entries = slots
        .into_iter()
        .map(|s| s.expect("pigeonhole: every slot filled"))
        .collect();
    Ok((entries, eos))
}

/// Picks the convention whose space marker prefixes the most entries.
pub fn detect_marker(raw: &[String]) -> Marker {
    let mut meta = 0usize;
    let mut byte = 0usize;
    let mut space = 0usize;
    for r in raw {
        match r.chars().next() {
            Some(METASYMBOL) => meta += 1,
            Some('\u{0120}') => byte += 1,
            Some(' ') => space += 1,
            _ => {}
        }
    }
    if byte > meta && byte >= space {
        Marker::ByteLevel
    } else if space > meta && space > byte {
        Marker::LiteralSpace
    } else {
        Marker::Metasymbol
    }
}

/// True for SentencePiece byte-fallback pieces such as `<0x0A>`.
pub fn is_byte_piece(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 6 && b.starts_with(b"<0x") && b[5] == b'>' && b[3].is_ascii_hexdigit() && b[4].is_ascii_hexdigit()
}

/// Converts a raw entry to `▁` form; returns `(text, opaque)`.
fn normalize(raw: &str, marker: Marker) -> (String, bool) {
    match marker {
        Marker::Metasymbol => (raw.to_string(), is_byte_piece(raw)),
        Marker::LiteralSpace => {
            if raw.contains(METASYMBOL) {
                (raw.to_string(), true)
            } else {
                (raw.replace(' ', "\u{2581}"), false)
            }
        }
        Marker::ByteLevel => {
            let table = byte_decoder();
            let bytes: Option<Vec<u8>> = raw.chars().map(|c| table.get(&c).copied()).collect();
            match bytes.map(String::from_utf8) {
                Some(Ok(text)) if !text.contains(METASYMBOL) => (text.replace(' ', "\u{2581}"), false),
                // Partial UTF-8 sequences are spelled as byte pieces so they
                // cannot collide with decoded text.
                Some(Err(e)) => (e.as_bytes().iter().map(|b| format!("<0x{b:02X}>")).collect(), true),
                _ => (raw.to_string(), true),
            }
        }
    }
}

fn denormalize(text: &str, marker: Marker) -> String {
    match marker {
        Marker::Metasymbol => text.to_string(),
        Marker::LiteralSpace => text.replace(METASYMBOL, " "),
        Marker::ByteLevel => {
            let enc = byte_encoder();
            text.replace(METASYMBOL, " ").bytes().map(|b| enc[b as usize]).collect()
        }
    }
}

/// GPT-2 byte-to-printable-character table.
pub fn byte_encoder() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut next = 256u32;
        for b in 0..=255u8 {
            let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
            table[b as usize] = if printable {
                char::from(b)
            } else {
                let c = char::from_u32(next).expect("valid scalar");
                next += 1;
                c
            };
        }
        table
    })
}

fn byte_decoder() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| byte_encoder().iter().enumerate().map(|(b, &c)| (c, b as u8)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lines: &[&str]) -> String {
        lines.iter().map(|l| format!("{l}\n")).collect()
    }

    #[test]
    fn parses_plain_lines_with_metasymbol() {
        let v = Vocabulary::parse(
            &plain(&["<eos>", "a", "▁a"]),
            VocabFormat::PlainLines,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.eos_id(), 0);
        assert_eq!(v.marker(), Marker::Metasymbol);
        assert_eq!(v.id_of("▁a"), Some(2));
    }

    #[test]
    fn duplicate_surface_reports_both_ids() {
        let err = Vocabulary::parse(
            &plain(&["<eos>", "a", "b", "a"]),
            VocabFormat::PlainLines,
            &LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            VocabError::DuplicateSurface { first, second, .. } => {
                assert_eq!((first, second), (1, 3))
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_eos_rejected_unless_appended() {
        let text = plain(&["a", "b"]);
        let err = Vocabulary::parse(&text, VocabFormat::PlainLines, &LoadOptions::default());
        assert!(matches!(err, Err(VocabError::MissingEos)));
        let v = Vocabulary::parse(
            &text,
            VocabFormat::PlainLines,
            &LoadOptions {
                append_eos: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.surface(v.eos_id()), DEFAULT_EOS);
    }

    #[test]
    fn byte_level_entries_are_normalized() {
        let text = r#"{"<|endoftext|>": 0, "Ġthe": 1, "the": 2, "Ċ": 3, "Ã": 4}"#;
        let v = Vocabulary::parse(text, VocabFormat::JsonMap, &LoadOptions::default()).unwrap();
        assert_eq!(v.marker(), Marker::ByteLevel);
        assert_eq!(v.surface(1), "▁the");
        assert_eq!(v.surface(3), "\n");
        // a lone 0xC3 lead byte is not text
        assert!(v.is_opaque(4));
        assert_eq!(v.surface(4), "<0xC3>");
        assert_eq!(v.export_surface(1), "Ġthe");
        assert_eq!(v.export_surface(4), "Ã");
    }

    #[test]
    fn json_eos_key_designates_eos() {
        let text = r#"{"eos": "</s>", "a": 0, "</s>": 1, "<eos>": 2}"#;
        let v = Vocabulary::parse(text, VocabFormat::JsonMap, &LoadOptions::default()).unwrap();
        assert_eq!(v.eos_id(), 1);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn json_integer_eos_key_is_an_ordinary_entry() {
        let text = r#"{"eos": 1, "<eos>": 0}"#;
        let v = Vocabulary::parse(text, VocabFormat::JsonMap, &LoadOptions::default()).unwrap();
        assert_eq!(v.id_of("eos"), Some(1));
        assert_eq!(v.eos_id(), 0);
    }

    #[test]
    fn json_id_gaps_rejected() {
        let text = r#"{"<eos>": 0, "a": 2}"#;
        let err = Vocabulary::parse(text, VocabFormat::JsonMap, &LoadOptions::default());
        assert!(matches!(err, Err(VocabError::BadIds { .. })));
    }

    #[test]
    fn tsv_reads_surface_column() {
        let v = Vocabulary::parse(
            "<unk>\t0\n</s>\t0\n▁the\t-3.2\n<0x0A>\t0\n",
            VocabFormat::SentencepieceTsv,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(v.eos_id(), 1);
        assert_eq!(v.surface(2), "▁the");
        assert!(v.is_opaque(3));
    }

    #[test]
    fn literal_space_marker_detected_and_restored() {
        let v = Vocabulary::parse(
            &plain(&["<eos>", " the", " a", "b"]),
            VocabFormat::PlainLines,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(v.marker(), Marker::LiteralSpace);
        assert_eq!(v.surface(1), "▁the");
        assert_eq!(v.export_surface(1), " the");
    }

    #[test]
    fn empty_line_is_rejected() {
        let err = Vocabulary::parse("<eos>\n\nb\n", VocabFormat::PlainLines, &LoadOptions::default());
        assert!(matches!(err, Err(VocabError::EmptyEntry(1))));
    }

    #[test]
    fn byte_encoder_is_a_bijection() {
        let enc = byte_encoder();
        let dec = byte_decoder();
        assert_eq!(dec.len(), 256);
        assert_eq!(enc[b' ' as usize], '\u{0120}');
        for b in 0..=255u8 {
            assert_eq!(dec[&enc[b as usize]], b);
        }
    }

    #[test]
    fn content_hash_ignores_marker() {
        let v = Vocabulary::from_entries(vec!["<eos>".into(), "▁x".into()], 0).unwrap();
        let w = v.clone().with_marker(Marker::ByteLevel);
        assert_eq!(v.content_hash(), w.content_hash());
        let u = Vocabulary::from_entries(vec!["<eos>".into(), "x".into()], 0).unwrap();
        assert_ne!(v.content_hash(), u.content_hash());
    }
}
