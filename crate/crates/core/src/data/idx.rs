use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), format!("header truncated, expected 4 bytes at offset {offset}")))
}

/// Parse an IDX file with the given magic; returns dimension sizes and the payload.
fn parse_idx<'a>(bytes: &'a [u8], path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let got = read_u32(bytes, 0, path)?;
    if got != magic {
        return Err(format_err(path, 0, format!("bad magic {got:#010x}, expected {magic:#010x}")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: {dims:?} needs {need} bytes from offset {start}, file ends early"),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, start + need, "trailing bytes after payload"));
    }
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let (idims, pixels) = parse_idx(&ib, images, IMAGE_MAGIC, 3)?;
    let (ldims, lbytes) = parse_idx(&lb, labels, LABEL_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if let Some(pos) = lbytes.iter().position(|&l| l > 9) {
        return Err(format_err(labels, 8 + pos, format!("label {} outside [0, 9]", lbytes[pos])));
    }
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let x = Tensor::new(&[idims[0], 1, idims[1], idims[2]], data)?;
    Dataset::new(x, lbytes.iter().map(|&l| l as usize).collect(), 10, split)
}
