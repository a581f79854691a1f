//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MEMAAECK"
//! version  u32
//! n_vars   u32
//! manifest u32 length + UTF-8 TOML of the training config
//! blocks   u32 count, then per block:
//!          u32 name length + name, u32 ndim, ndim x u64 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian. Parameter blocks come in model
//! declaration order, followed by `normalization.min` and `normalization.max`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::data::NormalizationStats;
use crate::model::MemAae;

use super::{ModelBundle, TrainConfig};

const MAGIC: &[u8; 8] = b"MEMAAECK";
const VERSION: u32 = 1;
const STATS_MIN: &str = "normalization.min";
const STATS_MAX: &str = "normalization.max";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated while reading {context}")]
    Truncated { context: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("block {index}: expected {expected:?}, found {found:?}")]
    BlockName { index: usize, expected: String, found: String },
    #[error("block {name}: expected shape {expected:?}, found {found:?}")]
    BlockShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has {found} blocks, model expects {expected}")]
    BlockCount { expected: usize, found: usize },
    #[error("trailing bytes after last block")]
    Trailing,
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(bundle, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(bundle: &ModelBundle, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bundle.n_vars() as u32).to_le_bytes())?;
    write_str(w, &bundle.config.to_toml())?;
    let store = bundle.model.params();
    w.write_all(&((store.len() + 2) as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_block(w, name, t.shape(), t.data())?;
    }
    let k = bundle.n_vars();
    write_block(w, STATS_MIN, &[k], &bundle.stats.min)?;
    write_block(w, STATS_MAX, &[k], &bundle.stats.max)?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the model from its own manifest.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), None)
}

/// Loads a checkpoint into the architecture described by `config`. Blocks
/// that do not fit that architecture are reported by name.
pub fn load_checkpoint_as(path: impl AsRef<Path>, config: &TrainConfig) -> Result<ModelBundle> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), Some(config))
}

pub fn read_checkpoint<R: Read>(r: &mut R, config: Option<&TrainConfig>) -> Result<ModelBundle> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let n_vars = read_u32(r, "variable count")? as usize;
    let manifest = read_str(r, "manifest")?;
    let stored: TrainConfig = toml::from_str(&manifest).map_err(|e| CheckpointError::Manifest(e.message().to_string()))?;
    let config = config.cloned().unwrap_or(stored);
    config.validate().map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut model =
        MemAae::new(config.model_config(n_vars), config.seed).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let count = read_u32(r, "block count")? as usize;
    let ids: Vec<_> = model.params().ids().collect();
    for (index, &id) in ids.iter().enumerate() {
        if index >= count {
            return Err(CheckpointError::BlockCount {
                expected: ids.len() + 2,
                found: count,
            });
        }
        let store = model.params_mut();
        let expected_name = store.name(id).to_string();
        let expected_shape = store.get(id).shape().to_vec();
        let values = read_block(r, index, &expected_name, &expected_shape)?;
        store.get_mut(id).data_mut().copy_from_slice(&values);
    }
    if count != ids.len() + 2 {
        return Err(CheckpointError::BlockCount {
            expected: ids.len() + 2,
            found: count,
        });
    }
    let min = read_block(r, ids.len(), STATS_MIN, &[n_vars])?;
    let max = read_block(r, ids.len() + 1, STATS_MAX, &[n_vars])?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Trailing);
    }
    Ok(ModelBundle {
        config,
        stats: NormalizationStats { min, max },
        model,
    })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_block<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    write_str(w, name)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated {
            context: context.to_string(),
        },
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, context: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R, context: &str) -> Result<String> {
    let len = read_u32(r, context)? as usize;
    // a corrupt length must not trigger a huge allocation
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(CheckpointError::Truncated {
            context: context.to_string(),
        });
    }
    String::from_utf8(buf).map_err(|_| CheckpointError::Manifest(format!("{context} is not UTF-8")))
}

fn read_block<R: Read>(r: &mut R, index: usize, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let context = format!("block {name}");
    let found_name = read_str(r, &context)?;
    if found_name != name {
        return Err(CheckpointError::BlockName {
            index,
            expected: name.to_string(),
            found: found_name,
        });
    }
    let ndim = read_u32(r, &context)? as usize;
    let found: Vec<usize> = (0..ndim.min(8))
        .map(|_| read_u64(r, &context).map(|d| d as usize))
        .collect::<Result<_>>()?;
    if ndim > 8 || found != shape {
        return Err(CheckpointError::BlockShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found,
        });
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, &context)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
