//! Binary entity files and checkpoints.
//!
//! Entity file: `WISP`, version, then `F, T, T_h, H, W` as little-endian
//! `u32`, then `F` length-prefixed UTF-8 channel names, then the `[F][T][H][W]`
//! payload as little-endian `f32`. The valid box is not stored; readers use
//! the default one-eighth margins.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::model::ModelConfig;
use crate::targets::{Entity, ValidBox};
use crate::tensor::{ParamStore, Tensor};

pub const ENTITY_MAGIC: &[u8; 4] = b"WISP";
pub const ENTITY_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| HarnessError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                HarnessError::Format(format!(
                    "truncated file: need {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| HarnessError::Format("payload size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(HarnessError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_entity(entity: &Entity) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + entity.data().len() * 4);
    out.extend_from_slice(ENTITY_MAGIC);
    put_u32(&mut out, ENTITY_VERSION as usize)?;
    for d in [
        entity.num_channels(),
        entity.frames(),
        entity.history(),
        entity.height(),
        entity.width(),
    ] {
        put_u32(&mut out, d)?;
    }
    for name in entity.channels() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
    }
    for v in entity.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_entity(bytes: &[u8]) -> Result<Entity> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != ENTITY_MAGIC {
        return Err(HarnessError::Format(
            "not an entity file (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != ENTITY_VERSION as usize {
        return Err(HarnessError::Format(format!(
            "unsupported entity version {version}"
        )));
    }
    let (f, t, th, h, w) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut channels = Vec::with_capacity(f);
    for _ in 0..f {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| HarnessError::Format(format!("channel name: {e}")))?;
        channels.push(name.to_string());
    }
    let count = [f, t, h, w]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| HarnessError::Format("dims overflow".into()))?;
    let data = r.f32s(count)?;
    r.done()?;
    Entity::new(channels, t, th, h, w, data, ValidBox::default_for(h, w))
        .map_err(|e| HarnessError::Format(e.to_string()))
}

pub fn write_entity(path: &Path, entity: &Entity) -> Result<()> {
    let bytes = encode_entity(entity)?;
    write_file(path, &bytes)
}

pub fn read_entity(path: &Path) -> Result<Entity> {
    decode_entity(&read_file(path)?)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| HarnessError::io(path, e))?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| HarnessError::io(path, e))
}

/// Where one parameter lives in the flat block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub epoch: usize,
    pub val_map: Option<f64>,
    pub params: Vec<ParamEntry>,
}

/// `WSPC`, version, header length, JSON header, then every parameter as
/// little-endian `f32` in store order.
pub fn encode_checkpoint(header_info: CheckpointInfo, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        model: header_info.model,
        seed: header_info.seed,
        step: header_info.step,
        epoch: header_info.epoch,
        val_map: header_info.val_map,
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| HarnessError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + offset * 4 + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Header fields supplied by the caller; the parameter index is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub epoch: usize,
    pub val_map: Option<f64>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(HarnessError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(HarnessError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
        .map_err(|e| HarnessError::Format(format!("checkpoint header: {e}")))?;
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let flat = r.f32s(total)?;
    r.done()?;
    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let slice = flat
            .get(p.offset..p.offset + n)
            .ok_or_else(|| HarnessError::Format(format!("parameter {} out of range", p.name)))?;
        let t = Tensor::new(p.shape.clone(), slice.to_vec())
            .map_err(|e| HarnessError::Format(e.to_string()))?;
        store
            .insert(&p.name, t)
            .map_err(|e| HarnessError::Format(e.to_string()))?;
    }
    Ok((header, store))
}

pub fn save_checkpoint(
    path: &Path,
    info: CheckpointInfo,
    store: &ParamStore<f32>,
) -> Result<String> {
    let bytes = encode_checkpoint(info, store)?;
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    decode_checkpoint(&read_file(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
