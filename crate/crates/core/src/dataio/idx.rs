use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::Dataset;

const TYPE_U8: u8 = 0x08;
const TYPE_F64: u8 = 0x0E;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

/// A decoded IDX tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    fn count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses a big-endian IDX buffer. Supported element types are unsigned
/// bytes (`0x08`) and doubles (`0x0E`).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let (ty, ndim) = (bytes[2], bytes[3] as usize);
    let elem = match ty {
        TYPE_U8 => 1,
        TYPE_F64 => 8,
        other => return Err(parse_err(2, format!("unsupported element type 0x{other:02x}"))),
    };
    if ndim == 0 {
        return Err(parse_err(3, "zero-dimensional IDX array"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let need = header + count * elem;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(parse_err(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let body = &bytes[header..need];
    let data = match ty {
        TYPE_U8 => IdxData::U8(body.to_vec()),
        _ => IdxData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(IdxArray { dims, data })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Serializes an IDX array; gzip-compressed when `path` ends in `.gz`.
pub fn write_idx(array: &IdxArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (ty, payload_len) = match &array.data {
        IdxData::U8(v) => (TYPE_U8, v.len()),
        IdxData::F64(v) => (TYPE_F64, v.len()),
    };
    if payload_len != array.count() || array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::shape(
            "write_idx",
            format!("{payload_len} values for dims {:?}", array.dims),
        ));
    }
    let mut bytes = vec![0, 0, ty, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} too large")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    match &array.data {
        IdxData::U8(v) => bytes.extend_from_slice(v),
        IdxData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_be_bytes())),
    }
    let io = |e| Error::io(path, e);
    if path.extension().is_some_and(|e| e == "gz") {
        let file = fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).map_err(io)?;
        enc.finish().map_err(io)?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(io)
    }
}

/// Loads an image/label IDX pair. Byte images are scaled to `[0, 1]`;
/// double-valued feature files are taken as is. Each sample is flattened
/// into one feature column.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = parse_idx(&read_maybe_gz(images.as_ref())?)?;
    let lab = parse_idx(&read_maybe_gz(labels.as_ref())?)?;
    let n = img.dims[0];
    let d: usize = img.dims[1..].iter().product();
    let labels: Vec<usize> = match (&lab.data, lab.dims.as_slice()) {
        (IdxData::U8(v), [_]) => v.iter().map(|&b| b as usize).collect(),
        _ => return Err(parse_err(2, "labels must be a 1-D unsigned byte array")),
    };
    if labels.len() != n {
        return Err(parse_err(4, format!("{} labels for {n} images", labels.len())));
    }
    // samples are stored contiguously; transpose into columns
    let mut features = Matrix::zeros(d, n);
    match &img.data {
        IdxData::U8(v) => {
            for (j, sample) in v.chunks_exact(d.max(1)).enumerate().take(n) {
                for (i, &px) in sample.iter().enumerate() {
                    features.set(i, j, px as f64 / 255.0);
                }
            }
        }
        IdxData::F64(v) => {
            for (j, sample) in v.chunks_exact(d.max(1)).enumerate().take(n) {
                for (i, &x) in sample.iter().enumerate() {
                    features.set(i, j, x);
                }
            }
        }
    }
    features.ensure_finite("IDX features")?;
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, classes)
}
