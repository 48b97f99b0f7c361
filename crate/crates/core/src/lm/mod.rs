//! A small pre-norm decoder-only transformer with a hand-written backward
//! pass, trained with Adam under a warmup + cosine schedule.

mod model;
mod ops;
mod train;

use serde::{Deserialize, Serialize};

pub use model::{EmbeddingSide, Model};
pub use ops::Scalar;
pub use train::{train, train_with, Checkpoint, LossSample};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input of length {len} exceeds the context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} is outside a vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("flags given for a model without non-canonical embeddings")]
    UnexpectedFlags,
    #[error("flag slice length {flags} does not match {tokens} tokens")]
    FlagLength { flags: usize, tokens: usize },
    #[error("empty input")]
    Empty,
    #[error("stream of {len} tokens cannot fill one training sequence of {need}")]
    StreamTooShort { len: usize, need: usize },
    #[error("stream vocabulary ({stream}) does not match model vocabulary ({model})")]
    VocabMismatch { stream: usize, model: usize },
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub context_length: usize,
    /// Share the input embedding matrix with the output layer.
    pub tied_embeddings: bool,
    /// 0, 1 (one vector for any flagged position) or 3 (one per rule).
    pub noncanonical_embedding_count: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::desk(2000)
    }
}

impl LmConfig {
    /// 12 layers, hidden 768, context 512.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            layers: 12,
            hidden_size: 768,
            heads: 12,
            context_length: 512,
            tied_embeddings: false,
            noncanonical_embedding_count: 0,
            seed: 0,
        }
    }

    /// 2 layers, hidden 128, 4 heads, context 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            layers: 2,
            hidden_size: 128,
            heads: 4,
            context_length: 256,
            tied_embeddings: false,
            noncanonical_embedding_count: 0,
            seed: 0,
        }
    }

    /// 2 layers, hidden 16, 2 heads, context 8.
    pub fn micro(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            layers: 2,
            hidden_size: 16,
            heads: 2,
            context_length: 8,
            tied_embeddings: false,
            noncanonical_embedding_count: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::Config(m.to_string()));
        if self.vocab_size == 0 || self.layers == 0 || self.hidden_size == 0 || self.heads == 0 {
            return bad("sizes must be positive");
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return bad("hidden_size must be divisible by heads");
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2");
        }
        if ![0, 1, 3].contains(&self.noncanonical_embedding_count) {
            return bad("noncanonical_embedding_count must be 0, 1 or 3");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    /// Seed for the order in which packed sequences are visited.
    pub data_seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 10_000,
            peak_lr: 6e-4,
            final_lr: 6e-6,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            log_every: 10,
            data_seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::Config(m.to_string()));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps must not exceed steps");
        }
        if !(self.final_lr <= self.peak_lr) || self.final_lr < 0.0 {
            return bad("need 0 <= final_lr <= peak_lr");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (1-based): linear warmup to
    /// the peak, then cosine decay reaching `final_lr` at the last step.
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = (self.steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = TrainSchedule {
            steps: 2000,
            ..Default::default()
        };
        assert_eq!(s.lr(500), 6e-4);
        assert_eq!(s.lr(2000), 6e-6);
        assert_eq!(s.lr(250), 3e-4);
        assert!(s.lr(1250) < 6e-4 && s.lr(1250) > 6e-6);
        let mid = 6e-6 + 0.5 * (6e-4 - 6e-6);
        assert!((s.lr(1250) - mid).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = TrainSchedule {
            steps: 700,
            warmup_steps: 50,
            ..Default::default()
        };
        for k in 1..50 {
            assert!(s.lr(k) < s.lr(k + 1));
        }
        for k in 50..700 {
            assert!(s.lr(k) >= s.lr(k + 1));
        }
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::desk(100).validate().is_ok());
        let mut c = LmConfig::micro(11);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.noncanonical_embedding_count = 2;
        assert!(c.validate().is_err());
        let bad = TrainSchedule {
            steps: 10,
            warmup_steps: 20,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
