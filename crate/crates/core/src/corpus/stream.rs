//! In-memory token and flag streams with their little-endian file formats.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{io_err, CorpusError};
use crate::kappa::RuleFlags;
use crate::vocab::Vocabulary;

const TOKS_MAGIC: &[u8; 4] = b"NDTK";
const FLAGS_MAGIC: &[u8; 4] = b"NDFL";
const FORMAT_VERSION: u16 = 1;

/// A concatenation of eos-terminated documents over one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    doc_offsets: Vec<u64>,
    vocab_hash: u64,
    vocab_len: u32,
}

impl TokenStream {
    /// Validates ids against `vocab`; `doc_offsets` must start at 0, be
    /// strictly increasing, and each document must end with eos.
    pub fn from_raw(ids: Vec<u32>, doc_offsets: Vec<u64>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        let s = Self {
            ids,
            doc_offsets,
            vocab_hash: vocab.content_hash(),
            vocab_len: vocab.len() as u32,
        };
        s.validate(Some(vocab.eos_id()))?;
        Ok(s)
    }

    /// Splits a flat id sequence into documents at every eos.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        let eos = vocab.eos_id();
        let mut offsets = Vec::new();
        let mut start = true;
        for (i, &id) in ids.iter().enumerate() {
            if start {
                offsets.push(i as u64);
            }
            start = id == eos;
        }
        Self::from_raw(ids, offsets, vocab)
    }

    fn validate(&self, eos: Option<u32>) -> Result<(), CorpusError> {
        for (pos, &id) in self.ids.iter().enumerate() {
            if id >= self.vocab_len {
                return Err(CorpusError::IdOutOfRange {
                    id,
                    pos,
                    len: self.vocab_len as usize,
                });
            }
        }
        if self.ids.is_empty() {
            return if self.doc_offsets.is_empty() {
                Ok(())
            } else {
                Err(CorpusError::InvalidStream("offsets without tokens".into()))
            };
        }
        if self.doc_offsets.first() != Some(&0) {
            return Err(CorpusError::InvalidStream("first document must start at 0".into()));
        }
        if self.doc_offsets.windows(2).any(|w| w[0] >= w[1])
            || *self.doc_offsets.last().unwrap() >= self.ids.len() as u64
        {
            return Err(CorpusError::InvalidStream("document offsets out of order".into()));
        }
        if let Some(eos) = eos {
            if *self.ids.last().unwrap() != eos
                || self.doc_offsets[1..].iter().any(|&o| self.ids[o as usize - 1] != eos)
            {
                return Err(CorpusError::InvalidStream("documents must end with eos".into()));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn doc_offsets(&self) -> &[u64] {
        &self.doc_offsets
    }

    pub fn num_docs(&self) -> usize {
        self.doc_offsets.len()
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len as usize
    }

    /// Errors unless the stream was produced over `vocab`.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        let expected = vocab.content_hash();
        if expected != self.vocab_hash {
            return Err(CorpusError::VocabMismatch {
                expected,
                found: self.vocab_hash,
            });
        }
        Ok(())
    }

    pub fn documents(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.doc_offsets.len()).map(move |d| {
            let lo = self.doc_offsets[d] as usize;
            let hi = self.doc_offsets.get(d + 1).map_or(self.ids.len(), |&o| o as usize);
            &self.ids[lo..hi]
        })
    }

    /// Whole leading documents holding at most `max_tokens` tokens (at least
    /// one document when the stream is non-empty).
    pub fn prefix_documents(&self, max_tokens: usize) -> TokenStream {
        let mut end_doc = 0;
        let mut end = 0;
        for (d, doc) in self.documents().enumerate() {
            if end + doc.len() > max_tokens && d > 0 {
                break;
            }
            end += doc.len();
            end_doc = d + 1;
        }
        TokenStream {
            ids: self.ids[..end].to_vec(),
            doc_offsets: self.doc_offsets[..end_doc].to_vec(),
            vocab_hash: self.vocab_hash,
            vocab_len: self.vocab_len,
        }
    }

    /// Same documents, ids replaced position-wise, new governing vocabulary.
    pub(crate) fn remapped(&self, ids: Vec<u32>, vocab: &Vocabulary) -> TokenStream {
        debug_assert_eq!(ids.len(), self.ids.len());
        TokenStream {
            ids,
            doc_offsets: self.doc_offsets.clone(),
            vocab_hash: vocab.content_hash(),
            vocab_len: vocab.len() as u32,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let width: u16 = if self.vocab_len < 1 << 16 { 2 } else { 4 };
        w.write_all(TOKS_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&width.to_le_bytes())?;
        w.write_all(&self.vocab_hash.to_le_bytes())?;
        w.write_all(&self.vocab_len.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.doc_offsets.len() as u64).to_le_bytes())?;
        for o in &self.doc_offsets {
            w.write_all(&o.to_le_bytes())?;
        }
        if width == 2 {
            for &id in &self.ids {
                w.write_all(&(id as u16).to_le_bytes())?;
            }
        } else {
            for &id in &self.ids {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CorpusError> {
        let fmt = |e: std::io::Error| CorpusError::Format(format!("truncated token file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != TOKS_MAGIC {
            return Err(CorpusError::Format("not a token stream file".into()));
        }
        let version = read_u16(r).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(CorpusError::Format(format!("unsupported version {version}")));
        }
        let width = read_u16(r).map_err(fmt)?;
        if width != 2 && width != 4 {
            return Err(CorpusError::Format(format!("bad id width {width}")));
        }
        let vocab_hash = read_u64(r).map_err(fmt)?;
        let vocab_len = read_u32(r).map_err(fmt)?;
        let _reserved = read_u32(r).map_err(fmt)?;
        let len = read_u64(r).map_err(fmt)? as usize;
        let n_docs = read_u64(r).map_err(fmt)? as usize;
        let mut doc_offsets = Vec::with_capacity(n_docs.min(1 << 24));
        for _ in 0..n_docs {
            doc_offsets.push(read_u64(r).map_err(fmt)?);
        }
        let mut raw = vec![0u8; len * width as usize];
        r.read_exact(&mut raw).map_err(fmt)?;
        let ids: Vec<u32> = if width == 2 {
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let s = TokenStream {
            ids,
            doc_offsets,
            vocab_hash,
            vocab_len,
        };
        s.validate(None)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Per-position κ provenance of a stream; a position is flagged when its
/// token is a non-canonical member of its group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagStream {
    flags: Vec<RuleFlags>,
    vocab_hash: u64,
}

impl FlagStream {
    pub fn new(flags: Vec<RuleFlags>, vocab_hash: u64) -> Self {
        Self { flags, vocab_hash }
    }

    pub fn flags(&self) -> &[RuleFlags] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        self.flags.iter().filter(|f| !f.is_empty()).count() as f64 / self.flags.len() as f64
    }

    /// Four bits per position, even positions in the low nibble.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FLAGS_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&0u16.to_le_bytes())?;
        w.write_all(&self.vocab_hash.to_le_bytes())?;
        w.write_all(&(self.flags.len() as u64).to_le_bytes())?;
        let packed: Vec<u8> = self
            .flags
            .chunks(2)
            .map(|c| (c[0].bits() & 0x0f) | c.get(1).map_or(0, |f| (f.bits() & 0x0f) << 4))
            .collect();
        w.write_all(&packed)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CorpusError> {
        let fmt = |e: std::io::Error| CorpusError::Format(format!("truncated flag file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != FLAGS_MAGIC {
            return Err(CorpusError::Format("not a flag stream file".into()));
        }
        let version = read_u16(r).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(CorpusError::Format(format!("unsupported version {version}")));
        }
        let _reserved = read_u16(r).map_err(fmt)?;
        let vocab_hash = read_u64(r).map_err(fmt)?;
        let len = read_u64(r).map_err(fmt)? as usize;
        let mut packed = vec![0u8; len.div_ceil(2)];
        r.read_exact(&mut packed).map_err(fmt)?;
        let flags = (0..len)
            .map(|i| RuleFlags::from_bits((packed[i / 2] >> (4 * (i % 2))) & 0x0f))
            .collect();
        Ok(Self { flags, vocab_hash })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn read_u16<R: Read>(r: &mut R) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
