//! Binary checkpoints: magic `SGN1`, a little-endian `u32` header length, a
//! UTF-8 `key = value` header, then named little-endian `f32` blocks.
//!
//! Floating-point header fields are written as the hex of their bit pattern
//! so a round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sgnet};
use crate::nn::ParamStore;
use crate::optim::{AdamState, Plateau};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGN1";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub plateau: Plateau,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    /// Base seed of the run; every random stream is derived from it.
    pub seed: u64,
    /// Other settings echoed into the header (data and training keys).
    pub extra: Vec<(String, String)>,
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(key: &str, s: &str) -> Result<f64> {
    u64::from_str_radix(s.trim(), 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("field {} is not a hex bit pattern: '{}'", key, s)))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn block(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32("block name length")? as usize;
        let name = String::from_utf8(self.take(n, "block name")?.to_vec())
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rank = self.u32("block rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("block {} declares rank {}", name, rank)));
        }
        let shape = (0..rank)
            .map(|_| self.u32("block shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("block too large".into()))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    /// Snapshot of a model with no optimizer state.
    pub fn of_model(model: &Sgnet<f32>, seed: u64) -> Self {
        Self {
            model: model.config().clone(),
            params: model.params().clone(),
            optimizer: None,
            plateau: Plateau::default(),
            epoch: 0,
            best_val: f64::INFINITY,
            seed,
            extra: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<Sgnet<f32>> {
        let named = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        Sgnet::from_named(self.model.clone(), named)
    }

    /// Header value for `key`, looking at the extra pairs.
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn header(&self) -> String {
        let mut lines = vec![format!("version = {}", VERSION)];
        lines.extend(self.model.to_pairs().into_iter().map(|(k, v)| format!("{} = {}", k, v)));
        lines.push(format!("state.epoch = {}", self.epoch));
        lines.push(format!("state.best_val = {}", bits(self.best_val)));
        lines.push(format!("state.seed = {}", self.seed));
        let p = &self.plateau;
        lines.push(format!("plateau.factor = {}", bits(p.factor)));
        lines.push(format!("plateau.patience = {}", p.patience));
        lines.push(format!("plateau.threshold = {}", bits(p.threshold)));
        lines.push(format!("plateau.min_lr = {}", bits(p.min_lr)));
        lines.push(format!("plateau.best = {}", bits(p.best)));
        lines.push(format!("plateau.bad_epochs = {}", p.bad_epochs));
        if let Some(a) = &self.optimizer {
            lines.push(format!("adam.lr = {}", bits(a.lr)));
            lines.push(format!("adam.beta1 = {}", bits(a.beta1)));
            lines.push(format!("adam.beta2 = {}", bits(a.beta2)));
            lines.push(format!("adam.eps = {}", bits(a.eps)));
            lines.push(format!("adam.step = {}", a.step));
        }
        lines.extend(self.extra.iter().map(|(k, v)| format!("extra.{} = {}", k, v)));
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        let n_opt = if self.optimizer.is_some() { 2 * self.params.len() } else { 0 };
        put_u32(&mut out, (self.params.len() + n_opt) as u32);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_block(&mut out, name, t);
        }
        if let Some(a) = &self.optimizer {
            for (name, t) in self.params.names().iter().zip(&a.m) {
                put_block(&mut out, &format!("{}{}", ADAM_M, name), t);
            }
            for (name, t) in self.params.names().iter().zip(&a.v) {
                put_block(&mut out, &format!("{}{}", ADAM_V, name), t);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let mut c = Cursor { buf, pos: 4 };
        let hlen = c.u32("header length")? as usize;
        let header = std::str::from_utf8(c.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut pairs = Vec::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line '{}'", line)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("header lacks {}", key)))
        };
        let int = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("field {} is not an integer", key)))
        };
        let version = int("version")?;
        if version != VERSION as u64 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads version {})",
                version, VERSION
            )));
        }
        let mut model = ModelConfig::default();
        for (k, v) in &pairs {
            if let Some(key) = k.strip_prefix("model.") {
                model.set(key, v).map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        let plateau = Plateau {
            factor: unbits("plateau.factor", get("plateau.factor")?)?,
            patience: int("plateau.patience")? as usize,
            threshold: unbits("plateau.threshold", get("plateau.threshold")?)?,
            min_lr: unbits("plateau.min_lr", get("plateau.min_lr")?)?,
            best: unbits("plateau.best", get("plateau.best")?)?,
            bad_epochs: int("plateau.bad_epochs")? as usize,
        };
        let has_opt = get("adam.step").is_ok();

        let n_blocks = c.u32("block count")? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n_blocks {
            let (name, t) = c.block()?;
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                check_moment(&params, rest, m.len(), &t)?;
                m.push(t);
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                check_moment(&params, rest, v.len(), &t)?;
                v.push(t);
            } else {
                params.add(name, t);
            }
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        let optimizer = if has_opt {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
            }
            Some(AdamState {
                lr: unbits("adam.lr", get("adam.lr")?)?,
                beta1: unbits("adam.beta1", get("adam.beta1")?)?,
                beta2: unbits("adam.beta2", get("adam.beta2")?)?,
                eps: unbits("adam.eps", get("adam.eps")?)?,
                step: int("adam.step")?,
                m,
                v,
            })
        } else {
            None
        };
        let ckpt = Self {
            model,
            params,
            optimizer,
            plateau,
            epoch: int("state.epoch")? as usize,
            best_val: unbits("state.best_val", get("state.best_val")?)?,
            seed: int("state.seed")?,
            extra: pairs
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        };
        // Fails on any mismatch between the declared config and the blocks.
        ckpt.to_model().map_err(|e| Error::Checkpoint(format!("parameters do not match the model config: {}", e)))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn check_moment(params: &ParamStore<f32>, name: &str, index: usize, t: &Tensor<f32>) -> Result<()> {
    match (params.names().get(index), params.tensors().get(index)) {
        (Some(n), Some(p)) if n == name && p.shape() == t.shape() => Ok(()),
        _ => Err(Error::Checkpoint(format!("optimizer moment {} does not match parameter {}", name, index))),
    }
}
