//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SPCKPT01"
//! u64 header length, header: sorted `key=value` lines (config echo, dtype, step, metadata)
//! u64 tensor count, then per tensor: u32 name length, name, u8 dtype tag, u32 rank, u64 dims, payload
//! u8 optimizer flag; if set: u64 step count, then first and second moments in parameter order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numeric::{DType, OptimizerState, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub step: u64,
    /// Free-form `key=value` metadata (training config echo, vocabulary...).
    pub meta: BTreeMap<String, String>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = DType::from_tag(self.u8()?).ok_or_else(|| bad(format!("unknown dtype for {name}")))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let width = dtype.tag() as usize;
        let raw = self.take(count * width)?;
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => T::c(f32::read_le(c) as f64),
                DType::F64 => T::c(f64::read_le(c)),
            })
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, optimizer: Option<OptimizerState<T>>, step: u64) -> Self {
        Self {
            model,
            optimizer,
            step,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.model.config.to_kv();
        header.insert("dtype".into(), T::DTYPE.name().into());
        header.insert("step".into(), self.step.to_string());
        for (k, v) in &self.meta {
            header.insert(format!("meta.{k}"), v.clone());
        }
        let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let params = &self.model.params;
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, t) in params.names().iter().zip(params.tensors()) {
            write_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step_count.to_le_bytes());
                for (name, t) in params.names().iter().zip(&opt.first_moment) {
                    write_tensor(&mut out, &format!("{name}#m1"), t);
                }
                for (name, t) in params.names().iter().zip(&opt.second_moment) {
                    write_tensor(&mut out, &format!("{name}#m2"), t);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig::from_kv(&header)?;
        let step: u64 = header
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing step"))?;
        let meta = header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();

        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let (name, t) = r.tensor::<T>()?;
            params.insert(name, t)?;
        }
        let model = Model::from_parts(config, params)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let mut read_moments = |suffix: &str| -> Result<Vec<Tensor<T>>> {
                    let mut out = Vec::with_capacity(n);
                    for (name, p) in model.params.names().iter().zip(model.params.tensors()) {
                        let (got, t) = r.tensor::<T>()?;
                        if got != format!("{name}{suffix}") || t.shape() != p.shape() {
                            return Err(bad(format!("optimizer entry {got} does not match {name}")));
                        }
                        out.push(t);
                    }
                    Ok(out)
                };
                let first_moment = read_moments("#m1")?;
                let second_moment = read_moments("#m2")?;
                Some(OptimizerState {
                    first_moment,
                    second_moment,
                    step_count,
                })
            }
            f => return Err(bad(format!("optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            model,
            optimizer,
            step,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
