//! Versioned checkpoint container.
//!
//! Layout: magic, format version, a JSON manifest (architecture hash, epoch,
//! trainer scalars, metric snapshot), then named tensors as shape +
//! little-endian float32 payload. Optimizer moments ride alongside the
//! parameters under an `optim.` prefix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{DepthfillError, Result};
use crate::metrics::MetricReport;

const MAGIC: &[u8; 4] = b"DFCP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch_hash: String,
    pub epoch: u32,
    pub global_step: u64,
    pub adam_step: u64,
    pub learning_rate: f64,
    pub plateau_best: Option<f64>,
    pub plateau_bad_epochs: u32,
    pub metrics: Option<MetricReport>,
}

pub fn save_checkpoint(
    path: &Path,
    manifest: &CheckpointManifest,
    tensors: &[(String, &ArrayD<f64>)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let manifest_json = serde_json::to_vec(manifest)
        .map_err(|e| DepthfillError::Format(format!("manifest encode: {e}")))?;
    w.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u8).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, HashMap<String, ArrayD<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DepthfillError::Format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(DepthfillError::CheckpointMismatch(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mlen = u32::from_le_bytes(len4) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| DepthfillError::Format(format!("manifest decode: {e}")))?;
    r.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let nlen = u16::from_le_bytes(len2) as usize;
        let mut nbytes = vec![0u8; nlen];
        r.read_exact(&mut nbytes)?;
        let name = String::from_utf8(nbytes)
            .map_err(|e| DepthfillError::Format(format!("tensor name: {e}")))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd)?;
        let ndim = nd[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut len4)?;
            shape.push(u32::from_le_bytes(len4) as usize);
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut f4 = [0u8; 4];
        for _ in 0..total {
            r.read_exact(&mut f4)?;
            data.push(f32::from_le_bytes(f4) as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| DepthfillError::Format(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok((manifest, tensors))
}
