//! Token corpora: a minimal BPE tokenizer, binary token streams, and the
//! duplication / deduplication transforms applied to them.

mod bpe;
mod stream;
mod transform;

pub use bpe::{train_bpe, BpeTokenizer};
pub use stream::{FlagStream, TokenStream};
pub use transform::{apply_kappa_stream, duplicate_sample_stream, noncanonical_flag_stream, swap_twins};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stream is governed by vocabulary {found:016x}, expected {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("token id {id} at position {pos} is outside a vocabulary of {len}")]
    IdOutOfRange { id: u32, pos: usize, len: usize },
    #[error("invalid stream: {0}")]
    InvalidStream(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("target vocabulary size {target} does not exceed the {base} base symbols")]
    TargetTooSmall { target: usize, base: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("tokenizer is missing {0}")]
    IncompleteTokenizer(String),
    #[error("merges file line {line}: {reason}")]
    BadMerge { line: usize, reason: String },
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}
