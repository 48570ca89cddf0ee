use std::path::Path;

use super::Dataset;
use crate::error::{io_err, RapError, Result};

pub const CIFAR_HW: usize = 32;
/// One label byte followed by 3072 channel-planar pixel bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_HW * CIFAR_HW;

/// Decodes CIFAR binary records into NHWC bytes.
pub fn parse_cifar(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(RapError::Cifar {
            offset,
            reason: format!("truncated record ({} trailing bytes)", bytes.len() % CIFAR_RECORD),
        });
    }
    let plane = CIFAR_HW * CIFAR_HW;
    let count = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(count * plane * 3);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(RapError::Cifar {
                offset: (i * CIFAR_RECORD) as u64,
                reason: format!("label {label} >= class count {num_classes}"),
            });
        }
        labels.push(label);
        let (r, g, b) = (&rec[1..1 + plane], &rec[1 + plane..1 + 2 * plane], &rec[1 + 2 * plane..]);
        for p in 0..plane {
            pixels.extend_from_slice(&[r[p], g[p], b[p]]);
        }
    }
    Dataset::new(CIFAR_HW, pixels, labels, num_classes)
}

pub fn load_cifar_binary(path: &Path, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_cifar(&bytes, num_classes)
}

/// Encodes a 32x32 dataset with fewer than 257 classes.
pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.hw() != CIFAR_HW || dataset.num_classes() > 256 {
        return Err(RapError::Dataset(format!(
            "CIFAR records hold 32x32 images and byte labels, dataset is {}x{} with {} classes",
            dataset.hw(),
            dataset.hw(),
            dataset.num_classes()
        )));
    }
    let plane = CIFAR_HW * CIFAR_HW;
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels()[i] as u8);
        let img = dataset.image_bytes(i);
        for ch in 0..3 {
            out.extend((0..plane).map(|p| img[p * 3 + ch]));
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}
