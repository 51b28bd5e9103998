//! IDX containers: big-endian `u32` header fields followed by `u8` payload.
//! Images use magic `0x00000803` (count, rows, cols), labels `0x00000801`.

use std::fs;
use std::path::Path;

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: format!(
                "truncated header: need 4 bytes, {} available",
                bytes.len().saturating_sub(offset)
            ),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        detail: format!("truncated payload: expected {len} bytes from offset {start}"),
    })
}

/// Returns `(rows, cols, pixels)` with one `rows * cols` slice per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<&[u8]>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 8,
            detail: format!("image dimensions {rows}x{cols} must be positive"),
        });
    }
    let data = payload(bytes, 16, count * rows * cols)?;
    let images = if count == 0 {
        Vec::new()
    } else {
        data.chunks_exact(rows * cols).collect()
    };
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    payload(bytes, 8, count)
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]` and each
/// image becomes an `[H, W, 1]` tensor. The class count is `max label + 1`.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let image_bytes = fs::read(image_path)?;
    let label_bytes = fs::read(label_path)?;
    let (rows, cols, images) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(px, &label)| {
            let data = px.iter().map(|&p| f64::from(p) / 255.0).collect();
            Ok((Sample::Image(Tensor::new(vec![rows, cols, 1], data)?), label as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples, classes)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<Vec<u8>> {
    if let Some(i) = images.iter().position(|im| im.len() != rows * cols) {
        return Err(Error::contract(format!("image {i} does not have {rows}x{cols} pixels")));
    }
    let mut out = Vec::with_capacity(16 + rows * cols * images.len());
    for field in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&field.to_be_bytes());
    }
    images.iter().for_each(|im| out.extend_from_slice(im));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an image/label IDX pair.
pub fn write_idx(
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    fs::write(image_path, encode_idx_images(rows, cols, images)?)?;
    fs::write(label_path, encode_idx_labels(labels))?;
    Ok(())
}
