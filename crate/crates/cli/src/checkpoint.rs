//! Binary checkpoint format.
//!
//! ```text
//! "NCKP"                 4 bytes
//! version                u32, little-endian (currently 1)
//! header length          u64, little-endian
//! header                 UTF-8 JSON (`Header`)
//! blob                   f32 values, little-endian
//! ```
//!
//! Each manifest entry names a parameter, its shape and the byte range of
//! its values in the blob. Entries are stored in offset order, back to back,
//! and together cover the blob exactly.

use std::path::Path;

use nanocontrol::control::ControlScheme;
use nanocontrol::dit::{DiTConfig, Model};
use nanocontrol::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_at, CliError, Code, Result};

pub const MAGIC: &[u8; 4] = b"NCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: DiTConfig,
    pub scheme: ControlScheme,
    /// Optimizer updates taken.
    pub step: u64,
    pub run: RunConfig,
    pub backbone_checksum: String,
    pub params: Vec<Entry>,
}

fn parse(msg: impl Into<String>) -> CliError {
    CliError::new(Code::Parse, msg)
}

pub fn encode(model: &Model<f32>, run: &RunConfig, step: u64) -> Vec<u8> {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = blob.len() as u64;
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let header = Header {
        model: model.config.clone(),
        scheme: model.scheme,
        step,
        run: run.clone(),
        backbone_checksum: model.backbone_checksum(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Header and blob of a checkpoint, after checking magic, version and layout.
pub fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(parse("not a checkpoint (missing NCKP magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CliError::new(
            Code::Version,
            format!("checkpoint format version {version} is not supported (this build reads version {VERSION})"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = 16usize
        .checked_add(hlen as usize)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse("header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| parse(format!("checkpoint header: {e}")))?;
    let blob = &bytes[end..];
    let mut cursor = 0u64;
    for e in &header.params {
        if e.offset != cursor {
            return Err(parse(format!(
                "`{}` starts at byte {} but the previous entry ends at {cursor}",
                e.name, e.offset
            )));
        }
        if e.len != 4 * e.shape.iter().product::<usize>() as u64 {
            return Err(parse(format!("`{}`: {} bytes do not fit shape {:?}", e.name, e.len, e.shape)));
        }
        cursor += e.len;
    }
    if cursor != blob.len() as u64 {
        return Err(parse(format!("manifest covers {cursor} bytes, blob has {}", blob.len())));
    }
    Ok((header, blob))
}

pub fn decode(bytes: &[u8]) -> Result<(Model<f32>, Header)> {
    let (header, blob) = split(bytes)?;
    let mut model = Model::<f32>::new(header.model.clone(), header.scheme, 0)?;
    if header.params.len() != model.store.len() {
        return Err(CliError::new(
            Code::Shape,
            format!(
                "checkpoint holds {} tensors, a `{}` model has {}",
                header.params.len(),
                header.scheme,
                model.store.len()
            ),
        ));
    }
    for e in &header.params {
        let id = model
            .store
            .id(&e.name)
            .ok_or_else(|| CliError::new(Code::Shape, format!("unexpected tensor `{}`", e.name)))?;
        if model.store.value(id).shape() != e.shape.as_slice() {
            return Err(CliError::new(
                Code::Shape,
                format!("`{}`: stored shape {:?}, model expects {:?}", e.name, e.shape, model.store.value(id).shape()),
            ));
        }
        let raw = &blob[e.offset as usize..(e.offset + e.len) as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        model.store.get_mut(id).value = Tensor::new(e.shape.clone(), data)?;
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model<f32>, run: &RunConfig, step: u64) -> Result<()> {
    io_at(path, std::fs::write(path, encode(model, run, step)))
}

pub fn load(path: &Path) -> Result<(Model<f32>, Header)> {
    let bytes = io_at(path, std::fs::read(path))?;
    decode(&bytes).map_err(|e| CliError::new(e.code, format!("{}: {}", path.display(), e.message)))
}
