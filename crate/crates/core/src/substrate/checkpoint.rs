//! `MARSCKPT` layout, all integers little-endian u32:
//!
//! ```text
//! "MARSCKPT" | version | config hash (32 bytes) | meta length | meta (JSON)
//! | record count | records...
//! record: name length | name (UTF-8) | rank | dims... | f32 values
//! ```

use super::{AdamState, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MARSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub meta: serde_json::Value,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format("checkpoint truncated".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], meta: serde_json::Value) -> Self {
        Self {
            config_hash,
            meta,
            records: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape.clone(),
            values: t.data.iter().map(|v| v.f64() as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn add_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.push(p.name.clone(), &p.value);
        }
    }

    pub fn add_optimizer<T: Scalar>(&mut self, store: &ParamStore<T>, state: &AdamState<T>) {
        for (id, p) in store.iter() {
            self.push(format!("{M_PREFIX}{}", p.name), &state.m[id.index()]);
            self.push(format!("{V_PREFIX}{}", p.name), &state.v[id.index()]);
        }
    }

    fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks record {name:?}")))?;
        if r.shape != shape {
            return Err(Error::Shape(format!(
                "checkpoint record {name:?} has shape {:?}, model expects {shape:?}",
                r.shape
            )));
        }
        Ok(Tensor {
            shape: r.shape.clone(),
            data: r.values.iter().map(|&v| T::of(v as f64)).collect(),
        })
    }

    /// Overwrites every parameter of `store` with the record of the same name.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape.clone())).collect();
        for (id, name, shape) in ids {
            store.get_mut(id).value = self.tensor(&name, &shape)?;
        }
        Ok(())
    }

    pub fn load_optimizer<T: Scalar>(&self, store: &ParamStore<T>, step: u64) -> Result<AdamState<T>> {
        let mut st = AdamState::new(store);
        st.step = step;
        for (id, p) in store.iter() {
            st.m[id.index()] = self.tensor(&format!("{M_PREFIX}{}", p.name), &p.value.shape)?;
            st.v[id.index()] = self.tensor(&format!("{V_PREFIX}{}", p.name), &p.value.shape)?;
        }
        Ok(st)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json value serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Format("not a MARSCKPT checkpoint".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = rd.take(32)?.try_into().unwrap();
        let meta_len = rd.u32()? as usize;
        let meta = serde_json::from_slice(rd.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = rd.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let n = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(n)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = len
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("record {name:?} is too large")))?;
            let values = rd
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, values });
        }
        if rd.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_hash,
            meta,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
