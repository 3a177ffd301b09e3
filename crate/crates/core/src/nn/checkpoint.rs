//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic      8 bytes   "FGCKPT\0\0"
//! version    u32       currently 1
//! header_len u64
//! header     JSON      { "meta": {str: str}, "params": [{"name", "shape"}],
//!                        "adam": null | {"lr", "beta1", "beta2", "eps", "step"} }
//! payload    f64[]     every parameter in header order, row-major;
//!                      then, when "adam" is present, all first moments
//!                      followed by all second moments in the same order
//! ```
//!
//! Loading checks the version and that names and shapes match the model.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use super::optim::Adam;
use super::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"FGCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct AdamEntry {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    meta: BTreeMap<String, String>,
    params: Vec<ParamEntry>,
    adam: Option<AdamEntry>,
}

pub fn to_bytes(store: &ParamStore, adam: Option<&Adam>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        params: store
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamEntry {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in store.params() {
        put(p.value.data());
    }
    if let Some(a) = adam {
        for m in &a.m {
            put(m);
        }
        for v in &a.v {
            put(v);
        }
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore, adam: Option<&Adam>, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(store, adam, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Contents of a checkpoint after validation against a model.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub meta: BTreeMap<String, String>,
    pub adam: Option<Adam>,
}

/// Overwrites `store` with the checkpoint's values.
pub fn from_bytes(bytes: &[u8], store: &mut ParamStore) -> Result<Loaded> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if header.params.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (entry, p) in header.params.iter().zip(store.params()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(NnError::Checkpoint(format!(
                "parameter mismatch: checkpoint {} {:?}, model {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    let mut payload = &body[hlen..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if payload.len() < n * 8 {
            return Err(bad("truncated payload"));
        }
        let mut vals = vec![0.0; n];
        let mut buf = [0u8; 8];
        for v in vals.iter_mut() {
            payload.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(vals)
    };
    let mut values = Vec::with_capacity(store.len());
    for p in store.params() {
        values.push(take(p.value.numel())?);
    }
    let adam = match &header.adam {
        Some(a) => {
            let mut m = Vec::with_capacity(store.len());
            for p in store.params() {
                m.push(take(p.value.numel())?);
            }
            let mut v = Vec::with_capacity(store.len());
            for p in store.params() {
                v.push(take(p.value.numel())?);
            }
            Some(Adam {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                m,
                v,
            })
        }
        None => None,
    };
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    for (p, vals) in store.params_mut().iter_mut().zip(values) {
        p.value.data_mut().copy_from_slice(&vals);
    }
    Ok(Loaded { meta: header.meta, adam })
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<Loaded> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, store)
}
