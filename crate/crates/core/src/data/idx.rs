//! Reader for the big-endian IDX container used by MNIST-family datasets.

use std::path::Path;

use crate::data::{Dataset, SplitRole};
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Parses an unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(format_err(
            path,
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(path, "empty image file"));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            path,
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads a paired image/label file set. Pixels are scaled by `1/255`; the
/// class count is one more than the largest label (at least two).
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path, role: SplitRole) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_images(&read(images_path)?, images_path)?;
    let labels = parse_labels(&read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let scale = T::lit(1.0 / 255.0);
    let images = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| T::lit(p as f64) * scale).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, role, images, labels, num_classes)
}

/// Serializes images (`[N, 1, h, w]`, values in `[0, 1]`) and labels as IDX.
pub fn encode<T: Scalar>(dataset: &Dataset<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = dataset.image_shape();
    if c != 1 {
        return Err(Error::invalid("dataset", "IDX export supports one channel"));
    }
    let mut images = Vec::with_capacity(16 + dataset.images().len());
    images.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), h, w] {
        images.extend((d as u32).to_be_bytes());
    }
    images.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend(LABELS_MAGIC.to_be_bytes());
    labels.extend((dataset.len() as u32).to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}
