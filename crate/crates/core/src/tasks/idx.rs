//! IDX (MNIST-family) binary reader and writer.
//!
//! Header: a big-endian `u32` magic (`0x00000803` for `u8` images of rank 3,
//! `0x00000801` for `u8` labels of rank 1) followed by one big-endian `u32`
//! per dimension, then the raw bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::linalg::Matrix;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DIGIT_CLASSES: usize = 10;

fn format_err(path: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Images as rows scaled to `[0, 1]`, plus `(height, width)`.
pub fn parse_images(bytes: &[u8], path: &str) -> Result<(Matrix, (usize, usize))> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let d = h * w;
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| format_err(path, 4, "image dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {n} images of {h}x{w} need {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(path, expected, "trailing bytes after image data"));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::new(n, d, data)?, (h, w)))
}

/// Labels, each checked against `class_count`.
pub fn parse_labels(bytes: &[u8], path: &str, class_count: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {n} labels need {} bytes", 8 + n),
        ));
    }
    if bytes.len() > 8 + n {
        return Err(format_err(path, 8 + n, "trailing bytes after label data"));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < class_count {
                Ok(b as usize)
            } else {
                Err(format_err(
                    path,
                    8 + i,
                    format!("label {b} outside [0, {class_count})"),
                ))
            }
        })
        .collect()
}

/// Loads a 10-class digit dataset from an IDX image file and label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with_classes(images, labels, DIGIT_CLASSES)
}

pub fn load_idx_with_classes(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    class_count: usize,
) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let image_name = images.display().to_string();
    let label_name = labels.display().to_string();
    let (x, shape) = parse_images(&read_bytes(images)?, &image_name)?;
    let y = parse_labels(&read_bytes(labels)?, &label_name, class_count)?;
    if y.len() != x.rows() {
        return Err(format_err(
            &label_name,
            4,
            format!("{} labels for {} images in {image_name}", y.len(), x.rows()),
        ));
    }
    Dataset::new(x, y, class_count)?.with_image_shape(shape.0, shape.1)
}

/// Writes images (values in `[0, 1]`, quantized to bytes) and labels.
pub fn write_idx(
    dataset: &Dataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = dataset
        .image_shape()
        .ok_or_else(|| Error::domain("dataset has no image shape"))?;
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .x()
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &y in dataset.y() {
        let b = u8::try_from(y).map_err(|_| Error::domain(format!("label {y} does not fit a byte")))?;
        lab.push(b);
    }
    write_atomic(images.as_ref(), &img)?;
    write_atomic(labels.as_ref(), &lab)
}
