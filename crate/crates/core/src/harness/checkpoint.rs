//! U3DL checkpoints. All integers little-endian.
//!
//! ```text
//! magic "U3DL" | u32 version | u32 meta length | meta (UTF-8)
//! u32 tensor count
//! per tensor: u16 name length | name | u8 dtype (0 = f64) | u8 ndim
//!             | u64 dims[ndim] | u64 byte offset from file start
//! raw f64 data
//! ```
//!
//! The meta text carries the training step, class names, vocabulary,
//! optimizer step counts and the full config. Optimizer moments are stored as
//! tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{Config, Preset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{AdamW, AdamWConfig, AdamWState, ParamStore, Tensor};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"U3DL";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode(meta: &str, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    head.extend_from_slice(meta.as_bytes());
    head.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut dir_len = 0usize;
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor {name} cannot be described")));
        }
        dir_len += 2 + name.len() + 2 + 8 * t.shape().len() + 8;
    }
    let mut offset = (head.len() + dir_len) as u64;
    let mut data = Vec::new();
    for (name, t) in tensors {
        head.extend_from_slice(&(name.len() as u16).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(DTYPE_F64);
        head.push(t.shape().len() as u8);
        for &d in t.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        offset += 8 * t.numel() as u64;
    }
    head.extend_from_slice(&data);
    Ok(head)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a U3DL file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?
        .to_string();
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflow")))?;
        let raw = offset
            .checked_add(numel)
            .and_then(|end| bytes.get(offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: data out of bounds")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, out))
}

/// Everything needed to rebuild a model and continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        let _ = writeln!(meta, "step {}", self.step);
        for c in &self.model.classes {
            let _ = writeln!(meta, "class {c}");
        }
        for i in 0..self.model.vocab.len() {
            let _ = writeln!(meta, "vocab {}", self.model.vocab.token(i).expect("dense ids"));
        }
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for id in self.store.ids() {
            tensors.push((self.store.name(id).to_string(), self.store.get(id)));
        }
        for (id, st) in self.store.ids().zip(self.optimizer.states()) {
            if let Some(st) = st {
                let name = self.store.name(id);
                let _ = writeln!(meta, "adam {name} {}", st.step);
                tensors.push((format!("adam.m.{name}"), &st.m));
                tensors.push((format!("adam.v.{name}"), &st.v));
            }
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(meta, "config {line}");
        }
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        encode(&meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode(bytes)?;
        let bad = |m: String| Error::Checkpoint(m);
        let mut step = None;
        let (mut classes, mut vocab, mut config_text) = (Vec::new(), Vec::new(), String::new());
        let mut adam_steps = Vec::new();
        for line in meta.lines() {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "step" => step = Some(rest.parse::<usize>().map_err(|_| bad(format!("bad step {rest:?}")))?),
                "class" => classes.push(rest.to_string()),
                "vocab" => vocab.push(rest),
                "adam" => {
                    let (name, n) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("bad adam line {line:?}")))?;
                    let n: u64 = n.parse().map_err(|_| bad(format!("bad adam step {n:?}")))?;
                    adam_steps.push((name.to_string(), n));
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                _ => return Err(bad(format!("unknown meta line {line:?}"))),
            }
        }
        let step = step.ok_or_else(|| bad("meta has no step".into()))?;
        let mut config = Config::preset(Preset::Desk);
        config.apply_text(&config_text, "checkpoint config")?;
        let vocab = Vocabulary::parse(&(vocab.join("\n") + "\n"))?;
        let (model, mut store) = Model::new(config.model.clone(), vocab, classes, config.seed)?;

        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name
                .remove(&name)
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            store.set(id, t).map_err(|e| bad(format!("parameter {name}: {e}")))?;
        }
        let mut optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.train.weight_decay,
                ..AdamWConfig::default()
            },
            &store,
        );
        let mut states = vec![None; store.len()];
        for (name, n) in adam_steps {
            let id = store
                .lookup(&name)
                .ok_or_else(|| bad(format!("optimizer state for unknown parameter {name}")))?;
            let m = by_name.remove(&format!("adam.m.{name}"));
            let v = by_name.remove(&format!("adam.v.{name}"));
            let (Some(m), Some(v)) = (m, v) else {
                return Err(bad(format!("incomplete optimizer state for {name}")));
            };
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(bad(format!("optimizer state shape mismatch for {name}")));
            }
            states[id.index()] = Some(AdamWState { step: n, m, v });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        optimizer.set_states(states);
        Ok(TrainState {
            config,
            model,
            store,
            optimizer,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainState::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_and_corruption() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 7.0]).unwrap();
        let b = Tensor::scalar(-0.0);
        let bytes = encode("hello", &[("a", &a), ("b.c", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"U3DL");
        let (meta, ts) = decode(&bytes).unwrap();
        assert_eq!(meta, "hello");
        assert_eq!(ts[0], ("a".to_string(), a));
        assert_eq!(ts[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).is_err());
    }
}
