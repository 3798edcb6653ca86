//! Parameter checkpoint files.
//!
//! Layout: the 8 bytes `MOMECKPT`, a little-endian `u64` header length, the
//! JSON header, then each parameter's raw little-endian payload in header
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MOMECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    /// Model-level metadata (architecture config, router registry).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        params: store
            .raw()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: p.group,
                trainable: p.trainable,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for p in store.raw() {
        buf.clear();
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: &str, n: usize) -> Result<(Vec<T>, usize)> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    };
    let need = n * width;
    if bytes.len() < need {
        return Err(Error::Format("payload truncated".into()));
    }
    let vals = bytes[..need]
        .chunks_exact(width)
        .map(|c| match width {
            4 => T::from_f64_lossy(f32::read_le(c) as f64),
            _ => T::from_f64_lossy(f64::read_le(c)),
        })
        .collect();
    Ok((vals, need))
}

/// Parses a checkpoint into a fresh store plus its header.
pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < 16 || &all[..8] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let hlen = u64::from_le_bytes(all[8..16].try_into().expect("8 bytes")) as usize;
    let body = &all[16..];
    if body.len() < hlen {
        return Err(Error::Format("header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unknown format version {}", header.format_version)));
    }
    let mut off = hlen;
    let mut store = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let (vals, used) = read_values::<T>(&body[off..], &header.dtype, n)?;
        off += used;
        let id = store.add(e.name.clone(), e.group, Tensor::new(e.shape.clone(), vals)?)?;
        store.set_trainable(id, e.trainable);
    }
    if off != body.len() {
        return Err(Error::Format("trailing bytes after payloads".into()));
    }
    Ok((store, header))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let mut f = fs::File::open(path)?;
    read_checkpoint(&mut f)
}
