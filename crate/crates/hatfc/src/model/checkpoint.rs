//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, format version (u32 LE), JSON header length
//! (u32 LE) and bytes, then one record per parameter tensor: name
//! length + name, rank + dims (u32 LE each), raw little-endian values
//! at the tagged precision. The header carries the full model config,
//! an explicit precision tag, and the fitted scaler when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{real, Real};

const MAGIC: &[u8; 8] = b"HATFCKPT";
const VERSION: u32 = 1;

/// Per-channel standardization constants carried with the model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScalerState {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    precision: u32,
    scaler: Option<ScalerState>,
    tensor_count: usize,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save<T: Real>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    scaler: Option<&ScalerState>,
) -> Result<()> {
    let views = params.tensors();
    let header = Header {
        config: cfg.clone(),
        precision: T::BITS,
        scaler: scaler.cloned(),
        tensor_count: views.len(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, header_bytes.len() as u32)?;
    w.write_all(&header_bytes)?;

    for view in &views {
        write_u32(&mut w, view.name.len() as u32)?;
        w.write_all(view.name.as_bytes())?;
        write_u32(&mut w, view.shape.len() as u32)?;
        for &d in &view.shape {
            write_u32(&mut w, d as u32)?;
        }
        if view.data.len() != view.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor {} length does not match its shape",
                view.name
            )));
        }
        for &v in view.data {
            let x = v.to_f64().ok_or_else(|| {
                Error::Checkpoint(format!("tensor {} holds an unconvertible value", view.name))
            })?;
            match T::BITS {
                32 => w.write_all(&(x as f32).to_le_bytes())?,
                _ => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Precision tag of a checkpoint without loading its tensors.
pub fn peek_precision(path: &Path) -> Result<u32> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    Ok(header.precision)
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelConfig, ModelParams<T>, Option<ScalerState>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.precision != T::BITS {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision is {}-bit, loader expects {}-bit",
            header.precision,
            T::BITS
        )));
    }
    header.config.validate()?;

    let mut params = ModelParams::<T>::zeros(&header.config)?;
    let order: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|v| (v.name.clone(), v.shape.clone()))
        .collect();
    if order.len() != header.tensor_count {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model wants {}",
            header.tensor_count,
            order.len()
        )));
    }

    let mut buffers = params.buffers_mut();
    for (idx, (expect_name, expect_shape)) in order.iter().enumerate() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &name != expect_name {
            return Err(Error::Checkpoint(format!(
                "tensor {idx} is named {name}, expected {expect_name}"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if &shape != expect_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {expect_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let buf = &mut buffers[idx];
        buf.clear();
        for _ in 0..n {
            let v = match header.precision {
                32 => {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    f32::from_le_bytes(b) as f64
                }
                _ => {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    f64::from_le_bytes(b)
                }
            };
            buf.push(real::<T>(v));
        }
    }
    drop(buffers);
    Ok((header.config, params, header.scaler))
}
