//! Model checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "FMCKPT01"
//! u32     header length in bytes
//! header  JSON: {format_version, arch, alphabet, seed, note}
//! repeat per layer, in architecture order:
//!   u32   layer name length
//!   bytes layer name (UTF-8)
//!   u64   value count
//!   f64[] values, IEEE-754 little-endian
//! ```
//!
//! The alphabet string in the header carries the corpus-derived character
//! vocabulary, so a checkpoint is self-contained for generation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{ArchConfig, ModelParams, Vocab};

const MAGIC: &[u8; 8] = b"FMCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub alphabet: String,
    pub seed: u64,
    pub note: String,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_checkpoint(
    path: &Path,
    model: &ModelParams,
    vocab: &Vocab,
    seed: u64,
    note: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: 1,
        arch: model.arch,
        alphabet: vocab.chars().iter().collect(),
        seed,
        note: note.to_string(),
    };
    let header = serde_json::to_vec(&meta)
        .map_err(|e| Error::Model(format!("checkpoint header serialization: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for (spec, values) in model.arch.layer_specs().iter().zip(&model.layers) {
        let name = spec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(values.len() as u64).to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Vocab, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic; not a model checkpoint"));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| bad(path, format!("bad header JSON: {e}")))?;
    if meta.format_version != 1 {
        return Err(bad(path, format!("unsupported format version {}", meta.format_version)));
    }
    meta.arch.validate()?;
    let vocab = Vocab::from_chars(meta.alphabet.chars().collect())?;
    if vocab.size() != meta.arch.vocab_size {
        return Err(bad(
            path,
            format!(
                "alphabet length {} does not match arch vocab {}",
                vocab.size(),
                meta.arch.vocab_size
            ),
        ));
    }

    let specs = meta.arch.layer_specs();
    let mut layers = Vec::with_capacity(specs.len());
    for spec in &specs {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad(path, "layer name not UTF-8"))?;
        if name != spec.name {
            return Err(bad(path, format!("expected layer {:?}, found {:?}", spec.name, name)));
        }
        let count = read_u64(&mut r)? as usize;
        if count != spec.dim {
            return Err(bad(
                path,
                format!("layer {:?} has {} values, expected {}", name, count, spec.dim),
            ));
        }
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(path, format!("layer {name:?} contains non-finite values")));
        }
        layers.push(values);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(path, format!("{} trailing bytes after last layer", rest.len())));
    }
    Ok((ModelParams { arch: meta.arch, layers }, vocab, meta))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
