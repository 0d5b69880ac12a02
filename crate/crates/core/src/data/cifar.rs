use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Read CIFAR-10 binary batches, scale pixels to `[0, 1]` and normalize each
/// channel with the given mean and standard deviation.
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split, mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
    if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!("CIFAR channel std must be positive, got {std:?}")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        read_file(path, mean, std, &mut data, &mut labels)?;
    }
    let n = labels.len();
    let x = Tensor::new(&[n, 3, 32, 32], data)?;
    Dataset::new(x, labels, 10, split)
}

fn read_file(path: &Path, mean: [f64; 3], std: [f64; 3], data: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!(
                "length {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    for (r, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD_BYTES) as u64,
                detail: format!("label {} outside [0, 9]", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        for (c, plane) in rec[1..].chunks(1024).enumerate() {
            data.extend(plane.iter().map(|&p| (p as f64 / 255.0 - mean[c]) / std[c]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_normalizes_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, 1024));
            bytes.extend(std::iter::repeat_n(0u8, 1024));
            bytes.extend(std::iter::repeat_n(51u8, 1024));
        }
        std::fs::write(&p, &bytes).unwrap();
        let d = load_cifar10_bin(std::slice::from_ref(&p), Split::Test, [0.5, 0.0, 0.0], [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.images.data()[1024], 0.0);
        assert!((d.images.data()[2048] - 0.2).abs() < 1e-12);

        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        match load_cifar10_bin(&[p], Split::Test, [0.0; 3], [1.0; 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD_BYTES as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
