//! `DRA1` checkpoint files.
//!
//! Layout: the magic bytes, a little-endian `u32` metadata length, a JSON
//! metadata document, then every parameter as little-endian `f32` in
//! manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::tensor::{Element, Precision};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRA1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    precision: Precision,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<T: Element, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let meta = Metadata {
        config: model.config.clone(),
        precision: T::PRECISION,
        params: model
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        let mut buf = Vec::with_capacity(4 * p.data.len());
        for v in &p.data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Element, R: Read>(mut r: R) -> Result<Model<T>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    read_exact(&mut r, &mut len, "metadata length")?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut r, &mut json, "metadata")?;
    let meta: Metadata = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.config.validate()?;
    let manifest = meta.config.manifest();
    if manifest.len() != meta.params.len()
        || manifest.iter().zip(&meta.params).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Checkpoint("parameter manifest does not match config".into()));
    }
    let mut params = Vec::with_capacity(meta.params.len());
    for e in meta.params {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        read_exact(&mut r, &mut buf, &e.name)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(Param {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last buffer".into()));
    }
    Model::from_params(meta.config, params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
