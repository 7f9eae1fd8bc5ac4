//! Parameter checkpoints: one JSON header line, then little-endian `f32`
//! parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hash::HASH_PRIMES;
use super::implicit::{ImplicitField, ImplicitFieldConfig};
use super::sh::SH_COEFFS;
use super::TrainableField;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dopplerfield-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ImplicitFieldConfig,
    pub mlp_widths: Vec<usize>,
    pub sh_coeffs: usize,
    pub hash_primes: [u32; 3],
    pub step: u64,
    pub num_params: usize,
    pub dtype: String,
    pub byte_order: String,
}

pub fn save_checkpoint(path: &Path, field: &ImplicitField, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: field.config().clone(),
        mlp_widths: field.mlp_widths().to_vec(),
        sh_coeffs: SH_COEFFS,
        hash_primes: HASH_PRIMES,
        step,
        num_params: field.num_params(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for v in field.params() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a field and the step it was saved at.
pub fn load_checkpoint(path: &Path) -> Result<(ImplicitField, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if header.hash_primes != HASH_PRIMES || header.sh_coeffs != SH_COEFFS {
        return Err(Error::Format("checkpoint uses incompatible hash or SH constants".into()));
    }
    let mut field = ImplicitField::new(header.config.clone())?;
    if field.num_params() != header.num_params || field.mlp_widths() != header.mlp_widths.as_slice() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", field.num_params()),
            actual: format!("{} parameters", header.num_params),
        });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * header.num_params {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            message: format!("expected {} parameter bytes, found {}", 4 * header.num_params, bytes.len()),
        });
    }
    for (p, b) in field.params_mut().iter_mut().zip(bytes.chunks_exact(4)) {
        *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    }
    Ok((field, header.step))
}
