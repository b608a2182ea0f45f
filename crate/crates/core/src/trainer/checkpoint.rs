//! Self-describing checkpoint archive.
//!
//! Layout: the 8-byte magic `UGDACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor as
//! raw little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet};

use super::config::TrainConfig;
use super::run::{Snapshot, TrainState, Trainer};
use super::step::{Models, Optimizers};

pub const MAGIC: &[u8; 8] = b"UGDACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    state: TrainState,
    optimizers: Vec<(String, Adam)>,
    tensors: Vec<TensorEntry>,
}

fn err(found: u32, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        found,
        supported: FORMAT_VERSION,
        reason: reason.into(),
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl Writer {
    fn put(&mut self, name: String, shape: &[usize], values: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            len: values.len(),
        });
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn params(&mut self, prefix: &str, ps: &ParamSet) {
        for p in &ps.params {
            self.put(format!("{prefix}/{}", p.name), &p.shape, &p.value);
        }
    }

    fn adam(&mut self, prefix: &str, ps: &ParamSet, opt: &Adam) {
        for ((p, m), v) in ps.params.iter().zip(&opt.m).zip(&opt.v) {
            self.put(format!("{prefix}.m/{}", p.name), &p.shape, m);
            self.put(format!("{prefix}.v/{}", p.name), &p.shape, v);
        }
    }
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        blob: Vec::new(),
    };
    let m = &trainer.models;
    let mut optimizers = Vec::new();
    if let (Some(h), Some(o)) = (&m.h, &trainer.opt.h) {
        w.params("h", &h.net.params);
        w.adam("adam.h", &h.net.params, o);
        optimizers.push(("h".to_string(), o.clone()));
    }
    w.params("s", &m.s.net.params);
    w.adam("adam.s", &m.s.net.params, &trainer.opt.s);
    optimizers.push(("s".to_string(), trainer.opt.s.clone()));
    if let (Some(d), Some(o)) = (&m.d, &trainer.opt.d) {
        w.params("d", &d.params);
        w.adam("adam.d", &d.params, o);
        optimizers.push(("d".to_string(), o.clone()));
    }
    if let Some(best) = &trainer.best {
        if let Some(h) = &best.h {
            w.params("best.h", h);
        }
        w.params("best.s", &best.s);
    }
    let header = Header {
        config: trainer.config.clone(),
        state: trainer.state.clone(),
        optimizers,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader {
    entries: Vec<(TensorEntry, Vec<f32>)>,
    version: u32,
}

impl Reader {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (e, v) = self
            .entries
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| err(self.version, format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(err(
                self.version,
                format!("tensor {name} has shape {:?}, model expects {shape:?}", e.shape),
            ));
        }
        Ok(v.clone())
    }

    fn fill(&self, prefix: &str, ps: &mut ParamSet) -> Result<()> {
        for p in &mut ps.params {
            p.value = self.take(&format!("{prefix}/{}", p.name), &p.shape)?;
        }
        Ok(())
    }

    fn fill_adam(&self, prefix: &str, ps: &ParamSet, opt: &mut Adam) -> Result<()> {
        opt.m = Vec::new();
        opt.v = Vec::new();
        for p in &ps.params {
            opt.m.push(self.take(&format!("{prefix}.m/{}", p.name), &p.shape)?);
            opt.v.push(self.take(&format!("{prefix}.v/{}", p.name), &p.shape)?);
        }
        Ok(())
    }

    fn has(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(e, _)| e.name.starts_with(&format!("{prefix}/")))
    }
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err(0, format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(version, "unsupported checkpoint version"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(err(version, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| err(version, format!("corrupt header: {e}")))?;
    let mut blob = &body[hlen..];
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.len * 4;
        if blob.len() < n || e.shape.iter().product::<usize>() != e.len {
            return Err(err(version, format!("truncated or inconsistent tensor {}", e.name)));
        }
        let v = blob[..n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blob = &blob[n..];
        entries.push((e, v));
    }
    if !blob.is_empty() {
        return Err(err(version, "trailing bytes after tensor data"));
    }
    let r = Reader { entries, version };

    let config = header.config;
    config
        .validate()
        .map_err(|e| err(version, format!("stored config invalid: {e}")))?;
    // weights are overwritten below; the init draws are irrelevant
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut models = Models::new(&config, &mut rng)?;
    let mut opt = Optimizers::new(&models, &config);
    let find_opt = |name: &str| -> Result<Adam> {
        header
            .optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| o.clone())
            .ok_or_else(|| err(version, format!("missing optimizer state for {name}")))
    };
    if let Some(h) = models.h.as_mut() {
        r.fill("h", &mut h.net.params)?;
        let mut o = find_opt("h")?;
        r.fill_adam("adam.h", &h.net.params, &mut o)?;
        opt.h = Some(o);
    } else if r.has("h") {
        return Err(err(version, "checkpoint has a heatmap network the configured variant lacks"));
    }
    r.fill("s", &mut models.s.net.params)?;
    let mut o = find_opt("s")?;
    r.fill_adam("adam.s", &models.s.net.params, &mut o)?;
    opt.s = o;
    if let Some(d) = models.d.as_mut() {
        if r.has("d") {
            r.fill("d", &mut d.params)?;
            let mut o = find_opt("d")?;
            r.fill_adam("adam.d", &d.params, &mut o)?;
            opt.d = Some(o);
        }
    }
    let best = if r.has("best.s") {
        let mut s = models.s.net.params.clone();
        r.fill("best.s", &mut s)?;
        let h = match &models.h {
            Some(h) => {
                let mut ps = h.net.params.clone();
                r.fill("best.h", &mut ps)?;
                Some(ps)
            }
            None => None,
        };
        Some(Snapshot { h, s })
    } else {
        None
    };
    Ok(Trainer {
        config,
        models,
        opt,
        state: header.state,
        best,
    })
}
