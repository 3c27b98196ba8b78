//! IDX image/label files (big-endian header, unsigned byte payload).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Dataset, ValueKind};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated IDX file, need {needed} bytes but found {available}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| IdxError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8], IdxError> {
    bytes.get(header..header + len).ok_or_else(|| IdxError::Truncated {
        path: path.to_path_buf(),
        needed: header + len,
        available: bytes.len(),
    })
}

/// Loads an image file (and optionally its labels); pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset, crate::Error> {
    let bytes = read_file(images)?;
    check_magic(&bytes, IMAGE_MAGIC, images)?;
    let n = read_u32(&bytes, 4, images)? as usize;
    let rows = read_u32(&bytes, 8, images)? as usize;
    let cols = read_u32(&bytes, 12, images)? as usize;
    let pixels = payload(&bytes, 16, n * rows * cols, images)?;
    let values = Array2::from_shape_fn((n, rows * cols), |(i, j)| {
        pixels[i * rows * cols + j] as f64 / 255.0
    });
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let dataset = Dataset::new(name, values, ValueKind::BinaryPixels, Some((rows, cols)))?;
    let Some(label_path) = labels else {
        return Ok(dataset);
    };
    let lbytes = read_file(label_path)?;
    check_magic(&lbytes, LABEL_MAGIC, label_path)?;
    let count = read_u32(&lbytes, 4, label_path)? as usize;
    if count != n {
        return Err(IdxError::CountMismatch { images: n, labels: count }.into());
    }
    let raw = payload(&lbytes, 8, count, label_path)?;
    dataset.with_labels(raw.iter().map(|&b| b as u32).collect())
}

/// Serializes image rows back to IDX bytes, rounding `value * 255`.
pub fn encode_idx_images(dataset: &Dataset) -> Vec<u8> {
    let (rows, cols) = dataset.image_shape().unwrap_or((1, dataset.dim()));
    let mut out = Vec::with_capacity(16 + dataset.values().len());
    out.extend(IMAGE_MAGIC.to_be_bytes());
    out.extend((dataset.len() as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    out.extend(
        dataset
            .values()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABEL_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
