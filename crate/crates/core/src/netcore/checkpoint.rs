//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::WeightVector;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<Matrix>,
}

/// Byte offset of a serde_json error position within `text`.
pub(crate) fn json_error_offset(text: &str, err: &serde_json::Error) -> u64 {
    let (line, col) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + col.saturating_sub(1)).min(text.len()) as u64
}

pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: json_error_offset(text, &e),
        message: e.to_string(),
    })
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(w: &WeightVector, path: impl AsRef<Path>) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        layer_sizes: w.spec().layer_sizes().to_vec(),
        layers: w.layers().to_vec(),
    };
    write_json(&file, path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WeightVector> {
    let file: CheckpointFile = read_json(path.as_ref())?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported checkpoint version {}", file.format_version),
        });
    }
    let w = WeightVector::new(file.layers)?;
    if w.spec().layer_sizes() != file.layer_sizes.as_slice() {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "declared sizes {:?} but layers imply {:?}",
                file.layer_sizes,
                w.spec().layer_sizes()
            ),
        ));
    }
    Ok(w)
}
