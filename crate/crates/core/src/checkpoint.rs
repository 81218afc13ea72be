//! Parameter checkpoints: magic `WGCKPT1`, a `u32` record count, then records of
//! `(u32 name length, name, u32 rank, u64 extents, f64 little-endian values)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"WGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_at(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn u64_at(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![1],
            values: vec![v],
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|r| r.values.first().copied())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        let buf = &mut buf;
        if take(buf, MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let n = u32_at(buf)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u32_at(buf)? as usize;
            let name = String::from_utf8(take(buf, len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = u32_at(buf)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_at(buf)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(buf, count.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized record".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, shape, values });
        }
        if !buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn add_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for id in store.ids() {
            self.push(store.name(id).to_string(), store.get(id));
        }
    }

    pub fn add_optimizer<T: Scalar>(&mut self, store: &ParamStore<T>, opt: &AdamW<T>) {
        let (m, v) = opt.moments();
        for id in store.ids() {
            self.push(format!("adam.m.{}", store.name(id)), &m[id.index()]);
            self.push(format!("adam.v.{}", store.name(id)), &v[id.index()]);
        }
        self.push_scalar("adam.step", opt.step_count() as f64);
    }

    fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if r.shape != shape {
            return Err(Error::Checkpoint(format!(
                "record {name} has shape {:?}, model expects {shape:?}",
                r.shape
            )));
        }
        Tensor::from_f64(r.shape.clone(), &r.values)
    }

    /// Overwrites every parameter of `store` from the checkpoint.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = self.tensor(store.name(id), store.get(id).shape())?;
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn load_optimizer<T: Scalar>(&self, store: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<()> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for id in store.ids() {
            let shape = store.get(id).shape();
            m.push(self.tensor(&format!("adam.m.{}", store.name(id)), shape)?);
            v.push(self.tensor(&format!("adam.v.{}", store.name(id)), shape)?);
        }
        let step = self
            .scalar("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing record adam.step".into()))?;
        opt.restore(m, v, step as u64);
        Ok(())
    }
}
