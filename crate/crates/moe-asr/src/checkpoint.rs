//! Checkpoint serialization.
//!
//! A checkpoint is a flat binary container: a JSON header carrying the
//! model configuration, the trainer RNG state, and the step counter,
//! followed by one record per parameter in registry order — path string,
//! shape, then the raw little-endian `f64` payload. The format is
//! deliberately position-stable so identical training runs produce
//! byte-identical files.
//!
//! Layout:
//!
//! ```text
//! magic    "MOEC"                          4 bytes
//! version  u32 LE                          currently 1
//! hdr_len  u64 LE
//! header   JSON: {config, rng, step}       hdr_len bytes
//! count    u64 LE                          number of parameter records
//! record*  path_len u32 LE | path utf-8 |
//!          ndim u32 LE | dims u64 LE … |
//!          values f64 LE …                 (numel values)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ParamRegistry};
use crate::tensor::rng::RngStream;

const MAGIC: &[u8; 4] = b"MOEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    rng: RngStream,
    step: u64,
}

/// A checkpoint read back into memory, not yet bound to live tensors.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: ModelConfig,
    pub rng: RngStream,
    pub step: u64,
    /// `(path, shape, values)` in file order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Writes the model parameters plus training state to `path`.
pub fn save(
    path: &Path,
    config: &ModelConfig,
    rng: &RngStream,
    step: u64,
    params: &ParamRegistry,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        rng: *rng,
        step,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a checkpoint file without binding it to a model.
pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; not a checkpoint file"
        )));
    }
    let version = read_exact_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let hdr_len = read_exact_u64(&mut r)? as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)?;
    let header: Header = serde_json::from_slice(&hdr)?;

    let count = read_exact_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_exact_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("parameter path is not utf-8: {e}")))?;
        let ndim = read_exact_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_exact_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        params.push((name, shape, values));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after final parameter record".into(),
        ));
    }
    Ok(CheckpointData {
        config: header.config,
        rng: header.rng,
        step: header.step,
        params,
    })
}

/// Copies stored values into a live registry. Every stored path must
/// exist with a matching shape, and every registry entry must be stored:
/// partial restores are refused.
pub fn restore(data: &CheckpointData, registry: &ParamRegistry) -> Result<()> {
    if data.params.len() != registry.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            data.params.len(),
            registry.len()
        )));
    }
    for (name, shape, values) in &data.params {
        let tensor = registry.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name:?} not in model"))
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {shape:?}, model {:?}",
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(values);
    }
    Ok(())
}

/// Reconstructs a full model (either family) from a checkpoint file,
/// returning it with the stored RNG state and step counter.
pub fn load_model(path: &Path) -> Result<(Model, RngStream, u64)> {
    let data = load(path)?;
    // Initialization values are immediately overwritten by the restore.
    let mut scratch = RngStream::new(0, 0);
    let model = Model::init(data.config.clone(), &mut scratch)?;
    restore(&data, &model.params())?;
    Ok((model, data.rng, data.step))
}
