//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RVNT\0"  u32 version
//! u32 len, config JSON
//! u32 n, n × u64 seeds
//! u32 n, n × tensor                 parameters
//! u8 has_optimizer [optimizer]
//! u32 crc32 of everything before it
//!
//! tensor    = u32 len, name, u32 ndim, ndim × u64 dims, f64 values
//! optimizer = 6 × f64 (lr, beta1, beta2, eps, weight_decay, decay_factor),
//!             u64 decay_interval, u64 step, first then second moments as tensors
//! ```
//!
//! Values are stored as `f64` whatever the scalar type, which is exact for
//! both `f32` and `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Revnet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::AdamW;

pub const MAGIC: &[u8; 5] = b"RVNT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<S>)>,
    pub optimizer: Option<AdamW<S>>,
    pub seeds: Vec<u64>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model(model: &Revnet<S>, optimizer: Option<&AdamW<S>>, seeds: Vec<u64>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
            seeds,
        }
    }

    pub fn to_model(&self) -> Result<Revnet<S>> {
        Revnet::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&serde_json::to_vec(&self.config)?);
        w.len(self.seeds.len());
        for &s in &self.seeds {
            w.u64(s);
        }
        w.len(self.params.len());
        for (name, t) in &self.params {
            w.tensor(name, t);
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(o) => {
                w.0.push(1);
                for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.decay_factor] {
                    w.f64(v);
                }
                w.u64(o.decay_interval);
                w.u64(o.step);
                for (i, t) in o.m.iter().chain(&o.v).enumerate() {
                    w.tensor(&format!("moment{i}"), t);
                }
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = MAGIC.len() + 4;
        if bytes.len() < head + 4 {
            return Err(Error::Corrupt(format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..head].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Corrupt("checksum mismatch (truncated or damaged file)".into()));
        }

        let mut r = Reader { buf: body, pos: head };
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
        let seeds = (0..r.len()?).map(|_| r.u64()).collect::<Result<_>>()?;
        let params: Vec<(String, Tensor<S>)> = (0..r.len()?).map(|_| r.tensor()).collect::<Result<_>>()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let f: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
                let (decay_interval, step) = (r.u64()?, r.u64()?);
                let mut moments: Vec<Tensor<S>> = (0..2 * params.len()).map(|_| Ok(r.tensor()?.1)).collect::<Result<_>>()?;
                let v = moments.split_off(params.len());
                Some(AdamW {
                    lr: f[0],
                    beta1: f[1],
                    beta2: f[2],
                    eps: f[3],
                    weight_decay: f[4],
                    decay_factor: f[5],
                    decay_interval,
                    step,
                    m: moments,
                    v,
                })
            }
            b => return Err(Error::Corrupt(format!("bad optimizer flag {b}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, params, optimizer, seeds })
    }
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<S>) -> Result<()> {
    Ok(fs::write(path, ckpt.to_bytes()?)?)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("checkpoint section exceeds u32::MAX entries"));
    }

    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }

    fn tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.bytes(name.as_bytes());
        self.len(t.ndim());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v.as_f64());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Tensor<S>)> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let ndim = self.len()?;
        let shape: Vec<usize> = (0..ndim).map(|_| Ok(self.u64()? as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos);
        let numel = numel.ok_or_else(|| Error::Corrupt(format!("tensor {name} shape {shape:?} exceeds file size")))?;
        let data = (0..numel).map(|_| Ok(S::lit(self.f64()?))).collect::<Result<Vec<S>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}
