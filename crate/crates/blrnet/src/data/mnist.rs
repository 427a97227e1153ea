//! MNIST in IDX format.

use std::path::Path;

use blrnet_core::dataset::Dataset;

use super::{normalize_channels, read_file, Splits};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const VALIDATION_SIZE: usize = 5000;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, offset as u64, "file truncated inside the header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(what, 0, format!("bad magic {:#010x}, expected {:#010x}", magic, IMAGES_MAGIC)));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(Error::format(what, bytes.len() as u64, format!("file truncated: {} pixel bytes, expected {}", body.len(), want)));
    }
    if body.len() > want {
        return Err(Error::format(what, (16 + want) as u64, "trailing bytes after the last image"));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an IDX label file.
pub fn parse_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(what, 0, format!("bad magic {:#010x}, expected {:#010x}", magic, LABELS_MAGIC)));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(what, bytes.len().min(8 + n) as u64, format!("{} label bytes, expected {}", body.len(), n)));
    }
    if let Some(i) = body.iter().position(|&l| l > 9) {
        return Err(Error::format(what, (8 + i) as u64, format!("label {} out of range", body[i])));
    }
    Ok(body.to_vec())
}

/// Raw pixel values (0..=255) and labels of one image/label file pair.
pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(&read_file(images)?, &images.display().to_string())?;
    let labels_raw = parse_labels(&read_file(labels)?, &labels.display().to_string())?;
    if labels_raw.len() != n {
        return Err(Error::format(labels.display().to_string(), 4, format!("{} labels for {} images", labels_raw.len(), n)));
    }
    let data = pixels.into_iter().map(f64::from).collect();
    Ok(Dataset::new([1, rows, cols], data, labels_raw.into_iter().map(usize::from).collect(), 10)?)
}

/// The full training and test files, unnormalized.
pub fn load_raw(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Global pixel mean and standard deviation of a set.
pub fn global_moments(ds: &Dataset) -> (f64, f64) {
    let n = ds.data().len() as f64;
    let mean = ds.data().iter().sum::<f64>() / n;
    let var = ds.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Loads MNIST, normalizes with the global pixel mean and standard deviation
/// of the full training file, holds out its last 5000 images for validation
/// and keeps the first `train_size` of the rest (all of them for `None`).
pub fn load(dir: &Path, train_size: Option<usize>) -> Result<Splits> {
    let (mut train, mut test) = load_raw(dir)?;
    let moments = [global_moments(&train)];
    normalize_channels(&mut train, &moments);
    normalize_channels(&mut test, &moments);
    let fit = train.len().saturating_sub(VALIDATION_SIZE);
    let val = train.slice(fit, train.len())?;
    let keep = train_size.unwrap_or(fit);
    if keep > fit {
        return Err(Error::Config(format!("training subset of {} exceeds the {} available images", keep, fit)));
    }
    Ok(Splits {
        train: train.slice(0, keep)?,
        val,
        test,
    })
}

/// Serializes images and labels in IDX format.
pub fn encode_idx(images: &[u8], labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    let mut im = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        im.extend_from_slice(&v.to_be_bytes());
    }
    im.extend_from_slice(images);
    let mut lb = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    (im, lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic() {
        let (im, lb) = encode_idx(&[0, 255, 7, 9, 1, 2, 3, 4], &[3, 9], 2, 2);
        let (n, r, c, px) = parse_images(&im, "im").unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px, [0, 255, 7, 9, 1, 2, 3, 4]);
        assert_eq!(parse_labels(&lb, "lb").unwrap(), [3, 9]);
        let mut bad = im.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_images(&bad, "im"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_images(&im[..im.len() - 1], "im"), Err(Error::Format { .. })));
        assert!(parse_labels(&im, "lb").is_err());
    }
}
