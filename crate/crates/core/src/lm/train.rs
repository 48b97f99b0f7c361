use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmConfig, LmError, Model, TrainSchedule};
use crate::corpus::{FlagStream, TokenStream};
use crate::kappa::RuleFlags;
use crate::rng::{counter_u64, streams};

const MAGIC: &[u8; 4] = b"NDCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the steps since the previous sample.
    pub loss: f64,
}

/// A trained model with the state needed to describe how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub schedule: TrainSchedule,
    pub step: usize,
    /// Data-order state: the epoch being visited and the position within it.
    pub epoch: u64,
    pub cursor: usize,
    /// Content hash of the vocabulary governing the training stream.
    pub vocab_hash: u64,
    pub loss_curve: Vec<LossSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    toolkit_version: String,
    config: LmConfig,
    schedule: TrainSchedule,
    step: usize,
    epoch: u64,
    cursor: usize,
    vocab_hash: String,
    num_params: usize,
    loss_curve: Vec<LossSample>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = Header {
            format: "neardup-checkpoint".into(),
            version: FORMAT_VERSION,
            toolkit_version: crate::VERSION.into(),
            config: self.model.config().clone(),
            schedule: self.schedule.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            vocab_hash: format!("{:016x}", self.vocab_hash),
            num_params: self.model.num_params(),
            loss_curve: self.loss_curve.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.model.num_params() * 4);
        for p in self.model.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, LmError> {
        let fmt = |e: std::io::Error| LmError::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(LmError::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(fmt)?;
        if u32::from_le_bytes(b4) != FORMAT_VERSION {
            return Err(LmError::Format("unsupported checkpoint version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(fmt)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json).map_err(fmt)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| LmError::Format(e.to_string()))?;
        let mut raw = vec![0u8; h.num_params * 4];
        r.read_exact(&mut raw).map_err(fmt)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vocab_hash =
            u64::from_str_radix(&h.vocab_hash, 16).map_err(|e| LmError::Format(format!("vocab hash: {e}")))?;
        Ok(Self {
            model: Model::from_params(h.config, params)?,
            schedule: h.schedule,
            step: h.step,
            epoch: h.epoch,
            cursor: h.cursor,
            vocab_hash,
            loss_curve: h.loss_curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let io = |source| LmError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let f = std::fs::File::open(path).map_err(|source| LmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for s in &self.loss_curve {
            out.push_str(&format!("{},{:e},{}\n", s.step, s.lr, s.loss));
        }
        out
    }
}

/// Visits the packed sequences of a stream in a fresh seeded order each epoch.
struct Batcher {
    seq_len: usize,
    n_chunks: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl Batcher {
    fn new(stream_len: usize, seq_len: usize, seed: u64) -> Result<Self, LmError> {
        let n_chunks = stream_len.saturating_sub(1) / seq_len;
        if n_chunks == 0 {
            return Err(LmError::StreamTooShort {
                len: stream_len,
                need: seq_len + 1,
            });
        }
        let mut b = Self {
            seq_len,
            n_chunks,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        b.shuffle();
        Ok(b)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n_chunks).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(counter_u64(self.seed, streams::SHUFFLE, self.epoch));
        self.order.shuffle(&mut rng);
    }

    /// Start offset of the next packed sequence; `seq_len + 1` tokens follow.
    fn next(&mut self) -> usize {
        if self.cursor == self.n_chunks {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let c = self.order[self.cursor];
        self.cursor += 1;
        c * self.seq_len
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, s: &TrainSchedule) {
        self.t += 1;
        let (b1, b2) = (s.beta1, s.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, s.eps as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] * inv_c2).sqrt() + eps);
        }
    }
}

pub fn train(
    config: &LmConfig,
    schedule: &TrainSchedule,
    stream: &TokenStream,
    flags: Option<&FlagStream>,
) -> Result<Checkpoint, LmError> {
    train_with(config, schedule, stream, flags, |_| {})
}

/// Trains from a fresh initialization, calling `on_log` at every loss sample.
///
/// The stream is packed contiguously into sequences of `context_length + 1`
/// tokens. Everything runs on one thread, so a fixed configuration always
/// produces the same checkpoint.
pub fn train_with(
    config: &LmConfig,
    schedule: &TrainSchedule,
    stream: &TokenStream,
    flags: Option<&FlagStream>,
    mut on_log: impl FnMut(&LossSample),
) -> Result<Checkpoint, LmError> {
    config.validate()?;
    schedule.validate()?;
    if stream.vocab_len() != config.vocab_size {
        return Err(LmError::VocabMismatch {
            stream: stream.vocab_len(),
            model: config.vocab_size,
        });
    }
    if let Some(f) = flags {
        if config.noncanonical_embedding_count == 0 {
            return Err(LmError::UnexpectedFlags);
        }
        if f.len() != stream.len() {
            return Err(LmError::FlagLength {
                flags: f.len(),
                tokens: stream.len(),
            });
        }
    }
    let t = config.context_length;
    let b = schedule.batch_size;
    let mut model = Model::<f32>::new(config.clone())?;
    let mut batcher = Batcher::new(stream.len(), t, schedule.data_seed)?;
    let n = model.num_params();
    let mut adam = Adam {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    let mut grads = vec![0.0f32; n];
    let mut inputs = vec![0u32; b * t];
    let mut targets = vec![0u32; b * t];
    let mut batch_flags = vec![RuleFlags::NONE; if flags.is_some() { b * t } else { 0 }];
    let ids = stream.ids();
    let mut curve = Vec::new();
    let mut window_loss = 0.0;
    let mut window_steps = 0;

    for step in 1..=schedule.steps {
        for row in 0..b {
            let start = batcher.next();
            inputs[row * t..(row + 1) * t].copy_from_slice(&ids[start..start + t]);
            targets[row * t..(row + 1) * t].copy_from_slice(&ids[start + 1..start + t + 1]);
            if let Some(f) = flags {
                batch_flags[row * t..(row + 1) * t].copy_from_slice(&f.flags()[start..start + t]);
            }
        }
        grads.fill(0.0);
        let fl = flags.map(|_| batch_flags.as_slice());
        let loss = model.loss_and_grad(&inputs, &targets, fl, b, t, &mut grads)?;
        if let Some(clip) = schedule.grad_clip {
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = schedule.lr(step);
        adam.step(model.params_mut(), &grads, lr, schedule);

        window_loss += loss as f64;
        window_steps += 1;
        if step % schedule.log_every == 0 || step == schedule.steps {
            let sample = LossSample {
                step,
                lr,
                loss: window_loss / window_steps as f64,
            };
            on_log(&sample);
            curve.push(sample);
            window_loss = 0.0;
            window_steps = 0;
        }
    }

    Ok(Checkpoint {
        model,
        schedule: schedule.clone(),
        step: schedule.steps,
        epoch: batcher.epoch,
        cursor: batcher.cursor,
        vocab_hash: stream.vocab_hash(),
        loss_curve: curve,
    })
}
