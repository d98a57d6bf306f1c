//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"SEDM"`, `u16` version, `u32` header length,
//! a JSON header naming every parameter and its shape, then the parameters'
//! values as concatenated `f32` arrays in header order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SedError};
use crate::params::ParamStore;
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"SEDM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub params: Vec<ParamEntry>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

/// SHA-256 of the compact JSON encoding, hex encoded.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(store: &ParamStore, config: &serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        params: store
            .iter()
            .map(|(name, a)| ParamEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        config_hash: config_hash(config),
        config: config.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * store.num_scalars());
    out.write_all(MAGIC).unwrap();
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(header.len() as u32).unwrap();
    out.write_all(&header).unwrap();
    for (_, a) in store.iter() {
        for &v in a.data() {
            out.write_f32::<LittleEndian>(v as f32).unwrap();
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, CheckpointHeader)> {
    let bad = |m: &str| SedError::Format(format!("checkpoint: {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.config_hash != config_hash(&header.config) {
        return Err(bad("config hash mismatch"));
    }
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f32::<LittleEndian>().map_err(|_| bad("truncated data"))? as f64);
        }
        store.insert(entry.name.clone(), Array::new(entry.shape.clone(), data)?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((store, header))
}

pub fn save(path: &Path, store: &ParamStore, config: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(store, config)?).map_err(SedError::io(path))
}

pub fn load(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    decode(&fs::read(path).map_err(SedError::io(path))?)
}

/// Rounds every parameter through `f32`, matching what a save/load cycle yields.
pub fn quantize(store: &mut ParamStore) {
    for a in store.values_mut() {
        a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
