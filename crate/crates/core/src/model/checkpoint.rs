//! Binary checkpoint container.
//!
//! Layout (little endian): magic `CHSQCKPT`, `u32` version, `u32` metadata
//! length and JSON metadata, `u32` parameter count, then per parameter a
//! `u16` name length, the UTF-8 name, `u32` rows, `u32` cols and
//! `rows * cols` `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::data::Normalization;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CHSQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub normalization: Option<Normalization>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(mut w: impl Write, params: &ModelParams, normalization: Option<&Normalization>) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        model: params.config.clone(),
        normalization: normalization.cloned(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(params.store.len() as u32).to_le_bytes())?;
    for p in params.store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("parameter name too long: {}", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, normalization: Option<&Normalization>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_checkpoint(std::io::BufWriter::new(file), params, normalization)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

/// Rebuilds the model from its stored configuration and overwrites every
/// parameter by name; names and shapes must match exactly.
pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(|e| bad(format!("truncated metadata: {e}")))?;
    let meta: Meta = serde_json::from_slice(&meta)?;
    let mut params = ModelParams::init(meta.model, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != params.store.len() {
        return Err(bad(format!(
            "checkpoint has {count} parameters, model expects {}",
            params.store.len()
        )));
    }
    for (i, p) in params.store.iter_mut().enumerate() {
        let len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        if name != p.name {
            return Err(bad(format!("parameter {i} is `{name}`, expected `{}`", p.name)));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if (rows, cols) != p.value.shape() {
            return Err(bad(format!(
                "parameter `{name}` has shape {rows}x{cols}, expected {}x{}",
                p.value.rows(),
                p.value.cols()
            )));
        }
        for v in p.value.data_mut() {
            *v = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        params,
        normalization: meta.normalization,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(file))
}
