//! Binary checkpoint container.
//!
//! ```text
//! magic        4 bytes  "GTCK"
//! version      u32
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32      over every preceding byte
//! ```
//!
//! Payload, little-endian throughout:
//!
//! ```text
//! model_hash u64, config_len u64, config text (key = value lines)
//! has_state u8; when 1:
//!   objective u8, step u64, seed u64, train_hash u64,
//!   adam_step u64, beta1 f64, beta2 f64, eps f64, weight_decay f64
//! n_params u64; per parameter:
//!   name_len u64, name bytes, trainable u8, decay u8,
//!   ndim u64, dims ndim x u64, values, then first and second moments
//!   when has_state
//! ```

use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

use super::model::{JointModel, ModelConfig};
use super::trainer::{Objective, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 16;

struct Writer(Vec<u8>);

impl Writer {
    fn u(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn b(&mut self, v: u8) {
        self.0.push(v);
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn tensor_data(&mut self, t: &Tensor) {
        t.data().iter().for_each(|&v| self.f(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated(format!(
                "checkpoint payload ends at byte {}",
                self.buf.len()
            )));
        }
        let buf = self.buf;
        let s = &buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn b(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.at) {
            return Err(Error::Truncated(format!("length {n} exceeds checkpoint payload")));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.at) {
            return Err(Error::Truncated("tensor exceeds checkpoint payload".into()));
        }
        (0..n).map(|_| self.f()).collect()
    }
}

/// Model parameters and, for resumable checkpoints, the training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: JointModel,
    pub state: Option<TrainState>,
}

pub fn encode_checkpoint(model: &JointModel, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let mut kv = KvConfig::new();
    model.cfg.to_kv(&mut kv);
    w.u(model.cfg.hash());
    w.bytes(kv.to_text().as_bytes());
    match state {
        Some(s) => {
            w.b(1);
            w.b(match s.objective {
                Objective::Pretrain => 1,
                Objective::Joint => 2,
            });
            w.u(s.step);
            w.u(s.seed);
            w.u(s.train_hash);
            let o = &s.optimizer;
            w.u(o.step);
            w.f(o.config.beta1);
            w.f(o.config.beta2);
            w.f(o.config.eps);
            w.f(o.config.weight_decay);
        }
        None => w.b(0),
    }
    w.u(model.store.len() as u64);
    for (id, p) in model.store.iter() {
        w.bytes(p.name.as_bytes());
        w.b(p.trainable as u8);
        w.b(p.decay as u8);
        w.u(p.value.shape().len() as u64);
        p.value.shape().iter().for_each(|&d| w.u(d as u64));
        w.tensor_data(&p.value);
        if let Some(s) = state {
            w.tensor_data(&s.optimizer.first[id.index()]);
            w.tensor_data(&s.optimizer.second[id.index()]);
        }
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Rebuilds the model from the embedded configuration and restores every
/// parameter. With `expected`, the stored architecture hash must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("checkpoint of {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Magic("checkpoint".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    match (HEADER as u64).checked_add(len).and_then(|e| e.checked_add(4)) {
        Some(e) if e <= bytes.len() as u64 => {}
        _ => return Err(Error::Truncated(format!("checkpoint payload of {len} bytes"))),
    }
    let body = HEADER + len as usize;
    let stored = u32::from_le_bytes(bytes[body..body + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: &bytes[HEADER..body],
        at: 0,
    };
    let model_hash = r.u()?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
    let cfg = ModelConfig::from_kv(&KvConfig::parse(text)?)?;
    if cfg.hash() != model_hash {
        return Err(Error::Parse("checkpoint config does not match its hash".into()));
    }
    if let Some(e) = expected {
        if e.hash() != model_hash {
            return Err(Error::ConfigHash {
                checkpoint: model_hash,
                current: e.hash(),
            });
        }
    }
    let has_state = r.b()? == 1;
    let header = if has_state {
        let objective = match r.b()? {
            1 => Objective::Pretrain,
            2 => Objective::Joint,
            o => return Err(Error::Parse(format!("objective tag {o}"))),
        };
        let (step, seed, train_hash, adam_step) = (r.u()?, r.u()?, r.u()?, r.u()?);
        let config = AdamWConfig {
            beta1: r.f()?,
            beta2: r.f()?,
            eps: r.f()?,
            weight_decay: r.f()?,
        };
        Some((objective, step, seed, train_hash, adam_step, config))
    } else {
        None
    };
    let mut model = JointModel::new(cfg)?;
    let n = r.len(1)?;
    if n != model.store.len() {
        return Err(Error::shape(format!(
            "checkpoint has {n} parameters, model {}",
            model.store.len()
        )));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for p in model.store.params_mut() {
        let name = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Parse("parameter name".into()))?;
        if name != p.name {
            return Err(Error::shape(format!(
                "checkpoint parameter `{name}` where `{}` expected",
                p.name
            )));
        }
        p.trainable = r.b()? == 1;
        p.decay = r.b()? == 1;
        let nd = r.len(8)?;
        let shape = (0..nd).map(|_| r.u().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::shape(format!(
                "`{name}`: shape {shape:?} vs {:?}",
                p.value.shape()
            )));
        }
        let count = p.value.len();
        p.value = Tensor::new(&shape, r.values(count)?)?;
        if has_state {
            first.push(Tensor::new(&shape, r.values(count)?)?);
            second.push(Tensor::new(&shape, r.values(count)?)?);
        }
    }
    if r.at != r.buf.len() {
        return Err(Error::Parse(format!(
            "{} trailing checkpoint bytes",
            r.buf.len() - r.at
        )));
    }
    model.freeze_vit = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("vit."))
        .all(|(_, p)| !p.trainable);
    let state = header.map(|(objective, step, seed, train_hash, adam_step, config)| TrainState {
        objective,
        step,
        seed,
        train_hash,
        optimizer: OptimizerState {
            config,
            step: adam_step,
            first,
            second,
        },
    });
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint(path: &Path, model: &JointModel, state: Option<&TrainState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?, expected)
}
