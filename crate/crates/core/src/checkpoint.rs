//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic     8 bytes  "RRACKPT\0"
//! version   u32
//! hash      u64      first 8 bytes of SHA-256 over the config text
//! epoch     u32      completed epochs
//! meta      u32 length + UTF-8 text (config lines, then "[history]" lines)
//! count     u32
//! tensors   count × { u32 name length, name, u32 rank, u64 per dim, f64 values }
//! ```
//!
//! Tensors are stored sorted by name: parameters under their own names,
//! batch-norm statistics as `<layer>.running_mean` / `.running_var`, and
//! optimizer moments as `adam.m.<param>` / `adam.v.<param>`. The optimizer
//! step count is the scalar tensor `adam.step`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use rra_tensor::Tensor;

use crate::config::KeyValues;
use crate::error::{io_err, Error, Result};
use crate::heads::LossKind;
use crate::trainer::{EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RRACKPT\0";
pub const VERSION: u32 = 1;
const HISTORY_MARKER: &str = "[history]";

pub fn config_hash(config_text: &str) -> u64 {
    let d = Sha256::digest(config_text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn history_line(r: &EpochRecord) -> String {
    let terms: Vec<String> = r.terms.iter().map(|(k, v)| format!("{}:{v}", k.token())).collect();
    let eval = r.eval_top1.map_or_else(|| "-".to_string(), |a| a.to_string());
    format!("{} {} {} {} {}", r.epoch, r.lr, r.train_loss, eval, terms.join(","))
}

fn parse_history_line(line: &str) -> Result<EpochRecord> {
    let bad = || Error::CorruptCheckpoint(format!("history line {line:?}"));
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 5 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let terms = f[4]
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|t| {
            let (k, v) = t.split_once(':').ok_or_else(bad)?;
            let kind = LossKind::ALL.into_iter().find(|x| x.token() == k).ok_or_else(bad)?;
            Ok((kind, num(v)?))
        })
        .collect::<Result<_>>()?;
    Ok(EpochRecord {
        epoch: f[0].parse().map_err(|_| bad())?,
        lr: num(f[1])?,
        train_loss: num(f[2])?,
        eval_top1: if f[3] == "-" { None } else { Some(num(f[3])?) },
        terms,
    })
}

fn named_tensors(state: &TrainState) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (i, p) in state.model.store.iter().enumerate() {
        out.insert(p.name.clone(), p.value.clone());
        out.insert(format!("adam.m.{}", p.name), state.optim.m[i].clone());
        out.insert(format!("adam.v.{}", p.name), state.optim.v[i].clone());
    }
    for (name, bn) in state.model.bn_states() {
        out.insert(format!("{name}.running_mean"), Tensor::from_vec(bn.running_mean.clone()));
        out.insert(format!("{name}.running_var"), Tensor::from_vec(bn.running_var.clone()));
    }
    out.insert("adam.step".into(), Tensor::scalar(state.optim.step as f64));
    out
}

pub fn encode(config: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let config_text = config.to_kv().to_text();
    let mut meta = config_text.clone();
    meta.push_str(HISTORY_MARKER);
    meta.push('\n');
    for r in &state.history {
        meta.push_str(&history_line(r));
        meta.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&config_text).to_le_bytes());
    out.extend_from_slice(&(state.epoch as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let tensors = named_tensors(state);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let hash = r.u64()?;
    let epoch = r.u32()? as usize;
    let meta = r.text()?;
    let (config_text, history_text) = meta
        .split_once(&format!("{HISTORY_MARKER}\n"))
        .ok_or_else(|| Error::CorruptCheckpoint("missing history section".into()))?;
    if config_hash(config_text) != hash {
        return Err(Error::CorruptCheckpoint("config hash mismatch".into()));
    }
    let config = KeyValues::parse(config_text)
        .and_then(|kv| TrainConfig::from_kv(&kv))
        .map_err(|e| Error::CorruptCheckpoint(format!("stored config: {e}")))?;
    let history = history_text.lines().map(parse_history_line).collect::<Result<Vec<_>>>()?;

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }

    let mut state = TrainState::new(&config).map_err(|e| Error::CorruptCheckpoint(format!("stored config: {e}")))?;
    state.epoch = epoch;
    state.history = history;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::CorruptCheckpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    for (i, p) in state.model.store.iter_mut().enumerate() {
        let shape = p.value.shape().to_vec();
        p.value = take(&p.name, &shape)?;
        state.optim.m[i] = take(&format!("adam.m.{}", p.name), &shape)?;
        state.optim.v[i] = take(&format!("adam.v.{}", p.name), &shape)?;
    }
    for (name, bn) in state.model.bn_states_mut() {
        let c = bn.channels();
        bn.running_mean = take(&format!("{name}.running_mean"), &[c])?.into_data();
        bn.running_var = take(&format!("{name}.running_var"), &[c])?.into_data();
    }
    state.optim.step = take("adam.step", &[1])?.item() as u64;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
    }
    if state.epoch > 0 {
        state.model.set_backbone_frozen(state.epoch - 1 < config.freeze_backbone_until);
    }
    Ok((config, state))
}

pub fn save(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(config, state)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}
