//! Binary checkpoints.
//!
//! Layout (integers little-endian): magic `SACN`, `u32` version,
//! `u32` length + UTF-8 config text, then tensor records until end of file.
//! A record is `u32` name length + UTF-8 name, `u8` rank, `rank × u32`
//! extents, and the values as `f64`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SacnModel;
use crate::nn::SpectralNormState;
use crate::rng::{Rng, RngState};
use crate::tensor::{Real, Tensor};

use super::optim::Optimizer;
use super::TrainState;

pub const MAGIC: &[u8; 4] = b"SACN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!("{what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("{}: {what} is not UTF-8", self.path.display())))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        });
    }

    pub fn push_values(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: vec![data.len()],
            data,
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());
        for t in &self.tensors {
            out.extend((t.name.len() as u32).to_le_bytes());
            out.extend(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                found: u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]]),
                expected: u32::from_be_bytes(*MAGIC),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint version {version}, this build reads {VERSION}",
                path.display()
            )));
        }
        let config = RunConfig::from_text(&r.string("config text")?)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name = r.string("tensor name")?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n, &format!("values of `{name}`"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters and spectral-normalization state of the stored model.
    pub fn model<T: Real>(&self) -> Result<SacnModel<T>> {
        let mut model = SacnModel::<T>::new(&self.config)?;
        for (name, p) in model.params_mut() {
            let t = self.require(name, &p.shape().to_vec())?;
            *p = Tensor::new(p.shape(), t.data.iter().map(|&x| T::of(x)).collect())?;
        }
        if let Some(a) = &mut model.attention {
            if let Some(states) = &mut a.spectral {
                let sigma = self.require("attention.spectral.sigma", &[3])?.data.clone();
                let degenerate = self.require("attention.spectral.degenerate", &[3])?.data.clone();
                for (k, (s, tag)) in states.iter_mut().zip(["f", "g", "h"]).enumerate() {
                    let u = self.require(&format!("attention.spectral.{tag}.u"), &[s.u.len()])?;
                    *s = SpectralNormState {
                        u: u.data.clone(),
                        sigma: sigma[k],
                        n_power_iters: s.n_power_iters,
                        degenerate: degenerate[k] != 0.0,
                    };
                }
            }
        }
        Ok(model)
    }
}

fn rng_words(s: &RngState) -> Vec<f64> {
    let mut out: Vec<f64> = s
        .seed
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    out.push((s.stream & 0xffff_ffff) as f64);
    out.push((s.stream >> 32) as f64);
    for k in 0..4 {
        out.push(((s.word_pos >> (32 * k)) & 0xffff_ffff) as f64);
    }
    out
}

fn rng_from_words(w: &[f64]) -> Result<RngState> {
    if w.len() != 14 || w.iter().any(|&x| x < 0.0 || x > u32::MAX as f64 || x.fract() != 0.0) {
        return Err(Error::Format("malformed random-stream state in checkpoint".into()));
    }
    let mut seed = [0u8; 32];
    for (k, x) in w[..8].iter().enumerate() {
        seed[4 * k..4 * k + 4].copy_from_slice(&(*x as u32).to_le_bytes());
    }
    let stream = w[8] as u64 | ((w[9] as u64) << 32);
    let word_pos = (0..4).fold(0u128, |acc, k| acc | ((w[10 + k] as u128) << (32 * k)));
    Ok(RngState { seed, stream, word_pos })
}

impl<T: Real> TrainState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            config: self.config.clone(),
            tensors: Vec::new(),
        };
        let params = self.model.params();
        for (name, p) in &params {
            c.push(*name, *p);
        }
        if let Some(states) = self.model.attention.as_ref().and_then(|a| a.spectral.as_ref()) {
            for (s, tag) in states.iter().zip(["f", "g", "h"]) {
                c.push_values(format!("attention.spectral.{tag}.u"), s.u.clone());
            }
            c.push_values("attention.spectral.sigma", states.iter().map(|s| s.sigma).collect());
            c.push_values(
                "attention.spectral.degenerate",
                states.iter().map(|s| s.degenerate as u8 as f64).collect(),
            );
        }
        c.push_values("optim.step", vec![self.optimizer.step as f64]);
        for (k, (name, _)) in params.iter().enumerate() {
            if let (Some(m), Some(v)) = (self.optimizer.m.get(k), self.optimizer.v.get(k)) {
                c.push(format!("optim.m.{name}"), m);
                c.push(format!("optim.v.{name}"), v);
            }
        }
        c.push_values("rng.shuffle", rng_words(&self.rng.state()));
        c.push_values(
            "progress",
            vec![self.epoch as f64, self.step as f64, self.best_val, self.bad_epochs as f64],
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let model = c.model::<T>()?;
        let params = model.params();
        let mut optimizer = Optimizer::new(&c.config.train, &params)?;
        optimizer.step = c.require("optim.step", &[1])?.data[0] as u64;
        for (k, (name, p)) in params.iter().enumerate() {
            if k < optimizer.m.len() {
                let m = c.require(&format!("optim.m.{name}"), p.shape())?;
                let v = c.require(&format!("optim.v.{name}"), p.shape())?;
                optimizer.m[k] = Tensor::new(p.shape(), m.data.iter().map(|&x| T::of(x)).collect())?;
                optimizer.v[k] = Tensor::new(p.shape(), v.data.iter().map(|&x| T::of(x)).collect())?;
            }
        }
        let rng = Rng::from_state(rng_from_words(&c.require("rng.shuffle", &[14])?.data)?);
        let progress = &c.require("progress", &[4])?.data;
        Ok(TrainState {
            config: c.config.clone(),
            model,
            optimizer,
            rng,
            epoch: progress[0] as usize,
            step: progress[1] as usize,
            best_val: progress[2],
            bad_epochs: progress[3] as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_words_round_trip() {
        let mut r = Rng::new(0xdead_beef);
        for _ in 0..37 {
            r.next_u64();
        }
        let s = r.state();
        assert_eq!(rng_from_words(&rng_words(&s)).unwrap(), s);
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let mut c = Checkpoint {
            config: RunConfig::preset("mini").unwrap(),
            tensors: Vec::new(),
        };
        c.push("a", &Tensor::<f32>::from_f64(&[2, 1], &[0.1, -3.0]).unwrap());
        c.push_values("b", vec![f64::INFINITY, 2.5]);
        let bytes = c.to_bytes();
        let p = Path::new("x.ckpt");
        let back = Checkpoint::from_bytes(&bytes, p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
    }
}
