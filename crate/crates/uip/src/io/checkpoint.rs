//! The `UIPM` model checkpoint.
//!
//! Layout (integers little-endian): magic `UIPM`, u32 version = 1,
//! u32 descriptor length + canonical architecture text, u64 param_count,
//! param_count f64 parameters, one stage-tag byte, u64 master seed.

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, ModelState};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UIPM";
const VERSION: u32 = 1;

/// Which pipeline stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Pretrained,
    Original,
    Unlearned,
    Defended,
}

impl StageTag {
    fn to_byte(self) -> u8 {
        match self {
            StageTag::Pretrained => 0,
            StageTag::Original => 1,
            StageTag::Unlearned => 2,
            StageTag::Defended => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(StageTag::Pretrained),
            1 => Some(StageTag::Original),
            2 => Some(StageTag::Unlearned),
            3 => Some(StageTag::Defended),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Pretrained => "pretrained",
            StageTag::Original => "original",
            StageTag::Unlearned => "unlearned",
            StageTag::Defended => "defended",
        }
    }
}

/// A model plus its stage tag and seed lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub stage: StageTag,
    pub master_seed: u64,
}

fn bin_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::BinFormat { path: path.display().to_string(), msg: msg.into() }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let descriptor = ckpt.model.arch().to_canonical_text();
    out.write_u32::<LittleEndian>(descriptor.len() as u32)?;
    out.write_all(descriptor.as_bytes())?;
    out.write_u64::<LittleEndian>(ckpt.model.param_count() as u64)?;
    for &p in ckpt.model.params() {
        out.write_f64::<LittleEndian>(p)?;
    }
    out.write_all(&[ckpt.stage.to_byte()])?;
    out.write_u64::<LittleEndian>(ckpt.master_seed)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| bin_err(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bin_err(path, format!("bad magic {magic:?}, expected UIPM")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing version"))?;
    if version != VERSION {
        return Err(bin_err(path, format!("unsupported version {version}")));
    }
    let desc_len =
        input.read_u32::<LittleEndian>().map_err(|_| bin_err(path, "missing descriptor length"))?;
    let mut desc = vec![0u8; desc_len as usize];
    input.read_exact(&mut desc).map_err(|_| bin_err(path, "truncated descriptor"))?;
    let descriptor =
        String::from_utf8(desc).map_err(|_| bin_err(path, "descriptor is not UTF-8"))?;
    let arch = ArchSpec::from_canonical_text(&descriptor)
        .map_err(|e| bin_err(path, format!("bad descriptor: {e}")))?;
    let count =
        input.read_u64::<LittleEndian>().map_err(|_| bin_err(path, "missing param count"))? as usize;
    if count != arch.param_count() {
        return Err(bin_err(
            path,
            format!("param count {count} does not match descriptor ({})", arch.param_count()),
        ));
    }
    let mut params = vec![0.0f64; count];
    input
        .read_f64_into::<LittleEndian>(&mut params)
        .map_err(|_| bin_err(path, "truncated parameter payload"))?;
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag).map_err(|_| bin_err(path, "missing stage tag"))?;
    let stage = StageTag::from_byte(tag[0])
        .ok_or_else(|| bin_err(path, format!("unknown stage tag {}", tag[0])))?;
    let master_seed =
        input.read_u64::<LittleEndian>().map_err(|_| bin_err(path, "missing master seed"))?;
    let mut trailing = Vec::new();
    input.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(bin_err(path, format!("{} trailing bytes", trailing.len())));
    }
    let model =
        ModelState::new(arch, params).map_err(|e| bin_err(path, format!("invalid payload: {e}")))?;
    Ok(Checkpoint { model, stage, master_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::train::init_model;
    use std::fs;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uipm");
        let arch = ArchSpec::conv_net([3, 8, 8], &[4], 3, 2, &[16], 5).unwrap();
        let ckpt = Checkpoint { model: init_model(&arch, 123), stage: StageTag::Original, master_seed: 99 };
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);

        let path2 = dir.path().join("m2.uipm");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_param_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uipm");
        let arch = ArchSpec::mlp(4, &[3], 2).unwrap();
        let ckpt = Checkpoint { model: init_model(&arch, 1), stage: StageTag::Pretrained, master_seed: 1 };
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // corrupt the declared param count (little-endian u64 after the
        // 4+4+4+descriptor prefix)
        let desc_len = ckpt.model.arch().to_canonical_text().len();
        bytes[12 + desc_len] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BinFormat { .. })));
    }

    #[test]
    fn rejects_bad_stage_tag_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uipm");
        let arch = ArchSpec::mlp(4, &[3], 2).unwrap();
        let ckpt = Checkpoint { model: init_model(&arch, 1), stage: StageTag::Unlearned, master_seed: 7 };
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // truncated payload
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BinFormat { .. })));

        // invalid tag byte
        let mut bad = bytes.clone();
        let tag_pos = bytes.len() - 9;
        bad[tag_pos] = 42;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BinFormat { .. })));

        // trailing garbage
        let mut padded = bytes.clone();
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BinFormat { .. })));
    }
}
