//! Binary checkpoints: parameters, optimizer moments and progress counters.
//!
//! Layout (little-endian): `FABRCKPT`, `u32` version, config hash as a
//! length-prefixed string, `u64` step, `u64` completed epochs, `u64`
//! optimizer step, `u32` tensor count, then per tensor its name, rank,
//! extents and three `f32` blocks (value, first moment, second moment).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FABRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.name.to_string(),
                position: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: format!("{}: {e}", self.name),
        })
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (id, name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, t);
            put_floats(&mut out, &self.adam.m[id.index()]);
            put_floats(&mut out, &self.adam.v[id.index()]);
        }
        out
    }

    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, name };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::BadMagic {
                path: name.to_string(),
                expected: "FABRCKPT".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{name}: unsupported version {version}"),
            });
        }
        let config_hash = r.string()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let pname = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            params.add(pname, Tensor::new(&shape, r.floats(n)?)?);
            m.push(Tensor::new(&shape, r.floats(n)?)?);
            v.push(Tensor::new(&shape, r.floats(n)?)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{name}: {} trailing bytes", bytes.len() - r.at),
            });
        }
        Ok(Checkpoint {
            config_hash,
            step,
            epoch,
            params,
            adam: AdamState { step: adam_step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, rejecting a config-hash mismatch unless `force`.
    pub fn load(path: &Path, expected_hash: &str, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes, &path.display().to_string())?;
        if !force && ck.config_hash != expected_hash {
            return Err(Error::ConfigHashMismatch {
                expected: expected_hash.to_string(),
                found: ck.config_hash,
            });
        }
        Ok(ck)
    }

    /// Copies stored tensors into `store` by name; every entry of `store` must be present with the same shape.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<AdamState<f32>> {
        if store.len() != self.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} tensors stored, model has {}", self.params.len(), store.len()),
            });
        }
        let mut adam = AdamState::zeros(store);
        adam.step = self.adam.step;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self.params.find(&name).ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("missing tensor {name}"),
            })?;
            store.set(id, self.params.get(src).clone())?;
            adam.m[id.index()] = self.adam.m[src.index()].clone();
            adam.v[id.index()] = self.adam.v[src.index()].clone();
        }
        Ok(adam)
    }
}
