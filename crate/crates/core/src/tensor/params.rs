//! Named parameters, Adam, and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LPCCKPT\0"
//! version   u32      1
//! config    u32 length + UTF-8 text (model configuration echo)
//! count     u32      number of tensors
//! tensor*   u32 name length + UTF-8 name
//!           u32 rank, rank x u64 dims
//!           prod(dims) x f64, row-major
//! digest    u64      first 8 bytes of SHA-256 over everything above
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::graph::Grads;
use super::Mat;
use crate::error::{corrupt, invalid, Error, Result};

const MAGIC: &[u8; 8] = b"LPCCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Mat,
    pub grad: Mat,
    m: Mat,
    v: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `shape` is informational; the value is stored as
    /// `value.rows x value.cols`.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Mat) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.data.len(), "shape vs value size");
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
            grad: Mat::zeros(r, c),
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Adds the gradients of every parameter leaf recorded on `graph`.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
        self.grads_ready = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
        self.grads_ready = false;
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return invalid("adam step without accumulated gradients");
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data[i] = m;
                p.v.data[i] = v;
                p.value.data[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn to_checkpoint(&self, config: String) -> Checkpoint {
        Checkpoint {
            config,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.value.data.clone()))
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; names, order and shapes must match.
    pub fn load_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.params.len() {
            return invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.params.len()
            ));
        }
        for (p, (name, shape, data)) in self.params.iter_mut().zip(&ckpt.tensors) {
            if &p.name != name || &p.shape != shape {
                return invalid(format!(
                    "checkpoint tensor {name} {shape:?} does not match model tensor {} {:?}",
                    p.name, p.shape
                ));
            }
            p.value.data.copy_from_slice(data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, &ckpt.config);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.tensors {
        if shape.iter().product::<usize>() != data.len() {
            return invalid(format!("tensor {name} payload does not match its shape"));
        }
        put_str(&mut buf, name);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..8]);
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + 8 || &buf[..8] != MAGIC {
        return corrupt("not a checkpoint file");
    }
    let (body, digest) = buf.split_at(buf.len() - 8);
    if Sha256::digest(body)[..8] != *digest {
        return corrupt("checkpoint digest mismatch");
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let version = cur.u32()?;
    if version != VERSION {
        return corrupt(format!("unsupported checkpoint version {version}"));
    }
    let config = cur.string()?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > (body.len() - cur.pos) / 8 {
            return corrupt(format!("tensor {name} runs past end of file"));
        }
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, shape, data));
    }
    if cur.pos != body.len() {
        return corrupt("trailing bytes in checkpoint");
    }
    Ok(Checkpoint { config, tensors })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt("checkpoint truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8".into()))
    }
}
