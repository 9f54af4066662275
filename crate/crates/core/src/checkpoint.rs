//! Versioned binary checkpoints of named parameter arrays and optimizer
//! moments, with a JSON sidecar holding the run configuration.
//!
//! Layout (little-endian): magic `STFBCKPT`, `u32` version, `u64`
//! fingerprint, `u64` step, `u64` Adam step, `u64` entry count, then per
//! entry a `u32` name length, the UTF-8 name, four `u64` dims and three
//! `f64` arrays (value, first moment, second moment).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::train::{Adam, TrainState};

const MAGIC: &[u8; 8] = b"STFBCKPT";
pub const VERSION: u32 = 1;

/// FNV-1a over the JSON encoding of the model configuration.
pub fn fingerprint(model: &ModelConfig) -> u64 {
    let bytes = serde_json::to_vec(model).expect("config serialises");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub fingerprint: String,
    pub step: usize,
    pub parameters: usize,
    pub scalars: usize,
    pub config: RunConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(state: &TrainState, model: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + state.store.num_scalars() * 24);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, fingerprint(model));
    put_u64(&mut out, state.step as u64);
    put_u64(&mut out, state.adam.t);
    put_u64(&mut out, state.store.len() as u64);
    for id in state.store.ids() {
        let name = state.store.name(id).as_bytes();
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        let value = state.store.value(id);
        for d in value.shape() {
            put_u64(&mut out, d as u64);
        }
        for t in [value, &state.adam.m[id.index()], &state.adam.v[id.index()]] {
            for &x in t.data() {
                out.extend_from_slice(&(x as f64).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            format: "checkpoint",
            path: self.path.to_path_buf(),
            location: format!("byte {}", self.pos),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: [usize; 4]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect();
        Tensor::new(shape, data)
    }
}

/// Decodes a checkpoint, returning the state and the stored fingerprint.
pub fn decode(bytes: &[u8], path: &Path, cfg: &crate::config::TrainConfig) -> Result<(TrainState, u64)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let fp = r.u64()?;
    let step = r.u64()? as usize;
    let t = r.u64()?;
    let count = r.u64()? as usize;
    let mut store = ParamStore::default();
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let raw = r.take(len)?.to_vec();
        let name = String::from_utf8(raw).map_err(|_| r.fail("parameter name is not UTF-8"))?;
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = r.u64()? as usize;
        }
        let value = r.tensor(shape)?;
        m.push(r.tensor(shape)?);
        v.push(r.tensor(shape)?);
        store.add(name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    let adam = Adam {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        t,
        m,
        v,
    };
    Ok((TrainState { store, adam, step }, fp))
}

/// Writes the binary checkpoint and its sidecar.
pub fn save(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state, &cfg.model)).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        format_version: VERSION,
        fingerprint: format!("{:016x}", fingerprint(&cfg.model)),
        step: state.step,
        parameters: state.store.len(),
        scalars: state.store.num_scalars(),
        config: cfg.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Reads a checkpoint and its sidecar, checking they belong together.
pub fn load(path: &Path) -> Result<(TrainState, RunConfig)> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (state, fp) = decode(&bytes, path, &side.config.train)?;
    if fp != fingerprint(&side.config.model) {
        return Err(Error::Format {
            format: "checkpoint",
            path: path.to_path_buf(),
            location: "header".into(),
            msg: "fingerprint does not match the sidecar configuration".into(),
        });
    }
    Ok((state, side.config))
}
