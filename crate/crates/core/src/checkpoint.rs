//! Self-describing checkpoint container.
//!
//! Layout: magic `D3D1`, a little-endian u32 header length, a JSON header
//! carrying the model config and the array directory (name, shape, dtype),
//! then the raw little-endian array payloads in directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"D3D1";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

fn dtype_of<F: Scalar>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

pub fn save<F: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamStore<F>) -> Result<()> {
    let arrays: Vec<ArrayEntry> = params
        .iter()
        .map(|(_, name, t)| ArrayEntry {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            dtype: dtype_of::<F>().to_string(),
        })
        .collect();
    let header = Header { version: 1, config: cfg.clone(), arrays };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, t) in params.iter() {
        if dtype_of::<F>() == "f32" {
            for &x in &t.data {
                w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
            }
        } else {
            for &x in &t.data {
                w.write_all(&x.to_f64_lossy().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<(ModelConfig, ParamStore<F>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }

    let mut params = ParamStore::new();
    for entry in &header.arrays {
        let n = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(n);
        match entry.dtype.as_str() {
            "f32" => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(4) {
                    data.push(F::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
                }
            }
            "f64" => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(8) {
                    data.push(F::c(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ])));
                }
            }
            other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
        }
        params.insert(entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data)?);
    }
    Ok((header.config, params))
}
