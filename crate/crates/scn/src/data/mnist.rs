//! IDX binary parsing for the 28x28 handwritten-digit dataset.
//!
//! Image files: magic 2051 (big-endian u32), count, rows, cols, then
//! row-major u8 pixels. Label files: magic 2049, count, then u8 labels.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Dataset, Manifest};
use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Loads `train` or `test` from the standard four IDX files in `dir`
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`).
pub fn load_mnist(dir: &Path, split: &str) -> Result<Dataset> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => {
            return Err(ScnError::InvalidArgument {
                op: "load_mnist",
                detail: format!("split must be train or test, got {}", other),
            })
        }
    };
    let image_path = dir.join(format!("{}-images-idx3-ubyte", prefix));
    let label_path = dir.join(format!("{}-labels-idx1-ubyte", prefix));
    let image_bytes = std::fs::read(&image_path).map_err(|e| ScnError::io(&image_path, e))?;
    let label_bytes = std::fs::read(&label_path).map_err(|e| ScnError::io(&label_path, e))?;

    let (images, n, h, w) = parse_idx_images(&image_bytes, &image_path)?;
    let labels = parse_idx_labels(&label_bytes, &label_path)?;
    if labels.len() != n {
        return Err(ScnError::Parse {
            path: label_path,
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), n),
        });
    }

    let mut manifest = Manifest::default();
    manifest.push("dataset", "mnist");
    manifest.push("split", split);
    manifest.push("images", image_path.display().to_string());
    manifest.push("images_sha256", hex::encode(Sha256::digest(&image_bytes)));
    manifest.push("labels", label_path.display().to_string());
    manifest.push("labels_sha256", hex::encode(Sha256::digest(&label_bytes)));

    Dataset::new(
        format!("mnist-{}", split),
        Tensor::new(vec![n, 1, h, w], images)?,
        labels,
        10,
        manifest,
    )
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let err = |offset: u64, detail: String| ScnError::Parse {
        path: PathBuf::from(path),
        offset,
        detail,
    };
    if bytes.len() < 16 {
        return Err(err(0, format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != IMAGE_MAGIC {
        return Err(err(0, format!("image magic {} != {}", magic, IMAGE_MAGIC)));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(err(
            bytes.len() as u64,
            format!("truncated: need {} bytes for {} {}x{} images", need, n, h, w),
        ));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, n, h, w))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let err = |offset: u64, detail: String| ScnError::Parse {
        path: PathBuf::from(path),
        offset,
        detail,
    };
    if bytes.len() < 8 {
        return Err(err(0, format!("header needs 8 bytes, file has {}", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != LABEL_MAGIC {
        return Err(err(0, format!("label magic {} != {}", magic, LABEL_MAGIC)));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err(err(
            bytes.len() as u64,
            format!("truncated: need {} label bytes", n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&(h as u32).to_be_bytes());
        bytes.extend_from_slice(&(w as u32).to_be_bytes());
        for i in 0..n * h * w {
            bytes.push((i % 256) as u8);
        }
        bytes
    }

    #[test]
    fn parses_synthetic_idx() {
        let bytes = idx_image_bytes(3, 4, 4);
        let (data, n, h, w) = parse_idx_images(&bytes, Path::new("synthetic")).unwrap();
        assert_eq!((n, h, w), (3, 4, 4));
        assert_eq!(data.len(), 48);
        assert_eq!(data[1], 1.0 / 255.0);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = idx_image_bytes(1, 2, 2);
        bytes[3] = 0;
        let err = parse_idx_images(&bytes, Path::new("synthetic")).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{}", err);
    }

    #[test]
    fn truncation_detected() {
        let mut bytes = idx_image_bytes(2, 3, 3);
        bytes.truncate(20);
        assert!(parse_idx_images(&bytes, Path::new("synthetic")).is_err());
    }

    #[test]
    fn label_parse_and_magic() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 1, 9]);
        let labels = parse_idx_labels(&bytes, Path::new("synthetic")).unwrap();
        assert_eq!(labels, vec![7, 1, 9]);
        bytes[0] = 1;
        assert!(parse_idx_labels(&bytes, Path::new("synthetic")).is_err());
    }
}
