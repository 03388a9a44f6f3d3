//! IDX reader for MNIST-style image and label files.
//!
//! Both formats start with a big-endian magic: `0x00000803` for images
//! (followed by count, rows, cols as `u32`, then one byte per pixel) and
//! `0x00000801` for labels (count, then one byte per label). Gzip files
//! are decompressed transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{LabeledDataset, MultiChannelImage};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("cannot read {}: {e}", path.display()))
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Returns `(rows, cols, pixels)` with one byte per pixel.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated image file: {count} images of {rows}x{cols} need {need} bytes, found {}",
            body.len()
        )));
    }
    let images = body[..need].chunks_exact(rows * cols.max(1)).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let count = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "truncated label file: {count} labels declared, {} bytes found",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

/// Loads an image/label IDX pair as single-channel images with raw 0–255 values.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (rows, cols, images) = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "image file holds {} samples but label file holds {}",
            images.len(),
            labels.len()
        )));
    }
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let images = images
        .into_iter()
        .map(|px| MultiChannelImage::new(rows, cols, 1, px.into_iter().map(f32::from).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = LabeledDataset::new(images, labels.into_iter().map(usize::from).collect(), class_count)?;
    ds.ground_truth_importance = Some(vec![1]);
    Ok(ds)
}
