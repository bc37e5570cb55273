//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DTRCKPT\0"
//! version  u32
//! entries  u32
//! index    per entry: name_len u32, name, kind u8, rank u32, dims u64 × rank,
//!          offset u64, byte_len u64        (offset relative to the payload)
//! payload  concatenated entry bytes
//! ```
//!
//! Entry kinds: 0 = f32 tensor, 1 = f64 tensor, 2 = u64 array, 3 = raw bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::network::Model;
use crate::norm::{BnRunningStats, BnStepStats};
use crate::params::{BnStore, ParamStore};
use crate::prng::{Prng, PrngState};
use crate::tensor::{Precision, Tensor};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"DTRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
}

/// Complete state of a run between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical experiment config text.
    pub config: String,
    pub method: String,
    pub fold: usize,
    pub model_seed: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub bn: BnStore,
    pub prng: PrngState,
}

enum Payload {
    Tensor(Tensor),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

fn corrupt(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(m.into())
}

impl Checkpoint {
    pub fn capture(model: &Model, trainer: &Trainer, config: &str, method: &str, fold: usize) -> Self {
        Checkpoint {
            config: config.to_string(),
            method: method.to_string(),
            fold,
            model_seed: model.seed,
            epoch: trainer.epoch,
            iteration: trainer.iteration,
            params: model.params.clone(),
            velocity: trainer.opt.velocity.clone(),
            bn: model.bn.clone(),
            prng: trainer.prng.state(),
        }
    }

    /// Overwrites the learned state of `model` and `trainer`.
    pub fn restore(&self, model: &mut Model, trainer: &mut Trainer) -> Result<(), CheckpointError> {
        let names: Vec<&str> = model.params.names().collect();
        let ours: Vec<&str> = self.params.names().collect();
        if names != ours {
            return Err(CheckpointError::Incompatible("parameter names differ".into()));
        }
        for (n, t) in model.params.iter() {
            let saved = self.params.get(n).expect("same names");
            if saved.shape() != t.shape() {
                return Err(CheckpointError::Incompatible(format!("{n}: shape {:?} vs {:?}", saved.shape(), t.shape())));
            }
        }
        model.params = self.params.clone();
        model.bn = self.bn.clone();
        model.seed = self.model_seed;
        trainer.opt.velocity = self.velocity.clone();
        trainer.prng = Prng::from_state(&self.prng);
        trainer.epoch = self.epoch;
        trainer.iteration = self.iteration;
        Ok(())
    }

    fn entries(&self) -> Vec<Entry> {
        let bytes = |name: &str, b: Vec<u8>| Entry {
            name: name.into(),
            shape: vec![b.len()],
            payload: Payload::Bytes(b),
        };
        let ints = |name: String, v: Vec<u64>| Entry {
            name,
            shape: vec![v.len()],
            payload: Payload::U64(v),
        };
        let mut out = vec![
            bytes("meta/config", self.config.as_bytes().to_vec()),
            bytes("meta/method", self.method.as_bytes().to_vec()),
            ints(
                "meta/counters".into(),
                vec![self.fold as u64, self.model_seed, self.epoch as u64, self.iteration as u64],
            ),
            bytes("meta/prng", self.prng.to_bytes().to_vec()),
        ];
        for (prefix, store) in [("param", &self.params), ("velocity", &self.velocity)] {
            for (n, t) in store.iter() {
                out.push(Entry {
                    name: format!("{prefix}/{n}"),
                    shape: t.shape().to_vec(),
                    payload: Payload::Tensor(t.clone()),
                });
            }
        }
        for (key, stats) in &self.bn {
            let steps = stats.steps.len();
            let f = stats.features;
            let flat = |pick: fn(&BnStepStats) -> &Vec<f64>| {
                let data: Vec<f64> = stats.steps.iter().flat_map(|s| pick(s).iter().copied()).collect();
                Tensor::new(vec![steps, f], data).expect("consistent running stats")
            };
            out.push(Entry {
                name: format!("bn/{key}/momentum"),
                shape: vec![1],
                payload: Payload::Tensor(Tensor::scalar(stats.momentum, Precision::F64).reshape(vec![1]).expect("one element")),
            });
            for (field, t) in [("mean", flat(|s| &s.mean)), ("var", flat(|s| &s.var))] {
                out.push(Entry {
                    name: format!("bn/{key}/{field}"),
                    shape: vec![steps, f],
                    payload: Payload::Tensor(t),
                });
            }
            out.push(ints(format!("bn/{key}/count"), stats.steps.iter().map(|s| s.count).collect()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut index = Vec::new();
        let mut payload = Vec::new();
        for e in &entries {
            let (kind, data): (u8, Vec<u8>) = match &e.payload {
                Payload::Tensor(t) if t.precision() == Precision::F32 => {
                    (0, t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())
                }
                Payload::Tensor(t) => (1, t.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
                Payload::U64(v) => (2, v.iter().flat_map(|v| v.to_le_bytes()).collect()),
                Payload::Bytes(b) => (3, b.clone()),
            };
            index.extend((e.name.len() as u32).to_le_bytes());
            index.extend(e.name.as_bytes());
            index.push(kind);
            index.extend((e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                index.extend((d as u64).to_le_bytes());
            }
            index.extend((payload.len() as u64).to_le_bytes());
            index.extend((data.len() as u64).to_le_bytes());
            payload.extend(data);
        }
        let mut out = Vec::with_capacity(16 + index.len() + payload.len());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((entries.len() as u32).to_le_bytes());
        out.extend(index);
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("entry name is not utf-8"))?;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
            index.push((name, kind, shape, offset, len));
        }
        let payload = &bytes[r.pos..];

        let mut ck = Checkpoint {
            config: String::new(),
            method: String::new(),
            fold: 0,
            model_seed: 0,
            epoch: 0,
            iteration: 0,
            params: ParamStore::new(),
            velocity: ParamStore::new(),
            bn: BTreeMap::new(),
            prng: PrngState {
                seed: [0; 32],
                stream: 0,
                word_pos: 0,
            },
        };
        let mut seen_prng = false;
        let mut bn_parts: BTreeMap<String, (f64, Option<Tensor>, Option<Tensor>, Vec<u64>)> = BTreeMap::new();
        for (name, kind, shape, offset, len) in index {
            let data = offset
                .checked_add(len)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| corrupt(format!("{name}: payload out of range")))?;
            let elements: usize = shape.iter().product();
            let tensor = || -> Result<Tensor, CheckpointError> {
                let (width, precision) = match kind {
                    0 => (4, Precision::F32),
                    1 => (8, Precision::F64),
                    _ => return Err(corrupt(format!("{name}: expected a tensor"))),
                };
                if data.len() != elements * width {
                    return Err(corrupt(format!("{name}: {} bytes for {elements} elements", data.len())));
                }
                let values: Vec<f64> = if width == 4 {
                    data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
                } else {
                    data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                };
                Tensor::with_precision(shape.clone(), values, precision).map_err(|e| corrupt(format!("{name}: {e}")))
            };
            let ints = || -> Result<Vec<u64>, CheckpointError> {
                if kind != 2 || data.len() != elements * 8 {
                    return Err(corrupt(format!("{name}: expected {elements} integers")));
                }
                Ok(data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            };
            let text = || -> Result<String, CheckpointError> {
                if kind != 3 {
                    return Err(corrupt(format!("{name}: expected bytes")));
                }
                String::from_utf8(data.to_vec()).map_err(|_| corrupt(format!("{name}: not utf-8")))
            };
            match name.as_str() {
                "meta/config" => ck.config = text()?,
                "meta/method" => ck.method = text()?,
                "meta/counters" => {
                    let c = ints()?;
                    let [fold, seed, epoch, iteration] = c[..] else {
                        return Err(corrupt("meta/counters: expected 4 values"));
                    };
                    (ck.fold, ck.model_seed, ck.epoch, ck.iteration) = (fold as usize, seed, epoch as usize, iteration as usize);
                }
                "meta/prng" => {
                    ck.prng = PrngState::from_bytes(data).ok_or_else(|| corrupt("meta/prng: bad length"))?;
                    seen_prng = true;
                }
                _ => {
                    if let Some(p) = name.strip_prefix("param/") {
                        ck.params.insert(p, tensor()?);
                    } else if let Some(p) = name.strip_prefix("velocity/") {
                        ck.velocity.insert(p, tensor()?);
                    } else if let Some(rest) = name.strip_prefix("bn/") {
                        let (key, field) = rest.rsplit_once('/').ok_or_else(|| corrupt(format!("{name}: bad bn entry")))?;
                        let part = bn_parts.entry(key.to_string()).or_insert((0.0, None, None, Vec::new()));
                        match field {
                            "momentum" => part.0 = tensor()?.data()[0],
                            "mean" => part.1 = Some(tensor()?),
                            "var" => part.2 = Some(tensor()?),
                            "count" => part.3 = ints()?,
                            _ => return Err(corrupt(format!("{name}: unknown bn field"))),
                        }
                    } else {
                        return Err(corrupt(format!("unknown entry {name}")));
                    }
                }
            }
        }
        if !seen_prng {
            return Err(corrupt("missing meta/prng"));
        }
        for (key, (momentum, mean, var, count)) in bn_parts {
            let (Some(mean), Some(var)) = (mean, var) else {
                return Err(corrupt(format!("bn/{key}: incomplete")));
            };
            let (steps, features) = (mean.shape()[0], mean.shape()[1]);
            if var.shape() != mean.shape() || count.len() != steps {
                return Err(corrupt(format!("bn/{key}: inconsistent shapes")));
            }
            let row = |t: &Tensor, s: usize| t.data()[s * features..(s + 1) * features].to_vec();
            let stats = BnRunningStats {
                momentum,
                features,
                steps: (0..steps)
                    .map(|s| BnStepStats {
                        mean: row(&mean, s),
                        var: row(&var, s),
                        count: count[s],
                    })
                    .collect(),
            };
            ck.bn.insert(key, stats);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT00000000"), Err(CheckpointError::Magic)));
        let mut v = MAGIC.to_vec();
        v.extend(9u32.to_le_bytes());
        v.extend(0u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version(9))));
    }
}
