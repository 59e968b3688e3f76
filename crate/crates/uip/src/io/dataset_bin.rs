//! The `UIPD` dataset container and the `UIPG` flat-gradient container.
//!
//! `UIPD` layout (all integers little-endian):
//! magic `UIPD`, u32 version = 1, u32 n, u32 ch, u32 h, u32 w,
//! u32 label-count, then `n*ch*h*w` f64 features, then `n` u32 labels.
//! Tabular rows of width `d` are stored as `ch=1, h=1, w=d` and load back
//! with feature shape `[d]`; anything else loads as `[ch, h, w]`.
//!
//! `UIPG` layout: magic `UIPG`, u32 version = 1, u64 len, then `len` f64
//! values.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{FlatGrad, Wrt};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DATASET_MAGIC: &[u8; 4] = b"UIPD";
const GRAD_MAGIC: &[u8; 4] = b"UIPG";
const VERSION: u32 = 1;

fn bin_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::BinFormat { path: path.display().to_string(), msg: msg.into() }
}

/// Write a dataset in the `UIPD` layout.
pub fn save_image_bin(ds: &Dataset, path: &Path) -> Result<()> {
    let (ch, h, w) = match ds.feature_shape() {
        [d] => (1usize, 1usize, *d),
        &[ch, h, w] => (ch, h, w),
        other => {
            return Err(bin_err(path, format!("unsupported feature shape {other:?}")));
        }
    };
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(ds.len() as u32)?;
    out.write_u32::<LittleEndian>(ch as u32)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    out.write_u32::<LittleEndian>(ds.class_count() as u32)?;
    for i in 0..ds.len() {
        for &v in ds.feature_row(i) {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    for &label in ds.labels() {
        out.write_u32::<LittleEndian>(label as u32)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a `UIPD` file back into a dataset.
pub fn load_image_bin(path: &Path) -> Result<Dataset> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| bin_err(path, "file too short for magic"))?;
    if &magic != DATASET_MAGIC {
        return Err(bin_err(path, format!("bad magic {magic:?}, expected UIPD")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing version"))?;
    if version != VERSION {
        return Err(bin_err(path, format!("unsupported version {version}")));
    }
    let n = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing n"))? as usize;
    let ch = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing ch"))? as usize;
    let h = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing h"))? as usize;
    let w = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing w"))? as usize;
    let classes =
        input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing label count"))? as usize;
    let dim = ch
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&d| d > 0)
        .ok_or_else(|| bin_err(path, format!("bad dimensions {ch}x{h}x{w}")))?;

    let mut features = vec![0.0f64; n * dim];
    input
        .read_f64_into::<LittleEndian>(&mut features)
        .map_err(|_| bin_err(path, "truncated feature payload"))?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(
            input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "truncated labels"))?
                as usize,
        );
    }
    let mut trailing = Vec::new();
    input.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(bin_err(path, format!("{} trailing bytes", trailing.len())));
    }
    let shape = if ch == 1 && h == 1 { vec![w] } else { vec![ch, h, w] };
    Dataset::new(features, labels, shape, classes)
        .map_err(|e| bin_err(path, format!("invalid payload: {e}")))
}

/// Write a flat gradient vector in the `UIPG` layout.
pub fn save_grad_bin(grad: &FlatGrad, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(GRAD_MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(grad.values.len() as u64)?;
    for &v in &grad.values {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a `UIPG` file. The vector is tagged as a parameter-space gradient.
pub fn load_grad_bin(path: &Path) -> Result<FlatGrad> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| bin_err(path, "file too short for magic"))?;
    if &magic != GRAD_MAGIC {
        return Err(bin_err(path, format!("bad magic {magic:?}, expected UIPG")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing version"))?;
    if version != VERSION {
        return Err(bin_err(path, format!("unsupported version {version}")));
    }
    let len = input.read_u64::<LittleEndian>().map_err(|_| bin_err(path, "missing length"))? as usize;
    let mut values = vec![0.0f64; len];
    input
        .read_f64_into::<LittleEndian>(&mut values)
        .map_err(|_| bin_err(path, "truncated payload"))?;
    Ok(FlatGrad { values, wrt: Wrt::Params })
}
