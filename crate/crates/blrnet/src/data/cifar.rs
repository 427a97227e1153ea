//! CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`).

use std::path::Path;

use blrnet_core::dataset::Dataset;

use super::{channel_moments, normalize_channels, read_file, zca::Zca, Splits};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
pub const VALIDATION_SIZE: usize = 5000;
pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parses concatenated records (label byte followed by 3072 CHW pixels).
pub fn parse_records(bytes: &[u8], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % RECORD_BYTES != 0 {
        let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
        return Err(Error::format(
            what,
            whole as u64,
            format!("file size {} is not a multiple of the {}-byte record size", bytes.len(), RECORD_BYTES),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(what, (i * RECORD_BYTES) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn to_dataset(labels: Vec<u8>, pixels: Vec<u8>) -> Result<Dataset> {
    Ok(Dataset::new(
        IMAGE_SHAPE,
        pixels.into_iter().map(f64::from).collect(),
        labels.into_iter().map(usize::from).collect(),
        10,
    )?)
}

/// Raw training (all batch files, in order) and test sets.
pub fn load_raw(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    for f in TRAIN_FILES {
        let p = dir.join(f);
        let (l, px) = parse_records(&read_file(&p)?, &p.display().to_string())?;
        labels.extend(l);
        pixels.extend(px);
    }
    let p = dir.join(TEST_FILE);
    let (tl, tp) = parse_records(&read_file(&p)?, &p.display().to_string())?;
    Ok((to_dataset(labels, pixels)?, to_dataset(tl, tp)?))
}

/// Splits off the last 5000 training images as validation, normalizes each
/// channel with statistics of the remaining training images and optionally
/// ZCA-whitens all splits with a transform fitted on those images.
pub fn prepare(train_full: Dataset, mut test: Dataset, zca_eps: Option<f64>, train_size: Option<usize>) -> Result<Splits> {
    let fit = train_full.len().saturating_sub(VALIDATION_SIZE);
    let mut val = train_full.slice(fit, train_full.len())?;
    let mut train = train_full.slice(0, fit)?;
    let moments = channel_moments(&train);
    normalize_channels(&mut train, &moments);
    normalize_channels(&mut val, &moments);
    normalize_channels(&mut test, &moments);
    if let Some(eps) = zca_eps {
        let z = Zca::fit(train.data(), train.image_len(), eps)?;
        for ds in [&mut train, &mut val, &mut test] {
            z.apply(ds.data_mut());
        }
    }
    if let Some(k) = train_size {
        if k > train.len() {
            return Err(Error::Config(format!("training subset of {} exceeds the {} available images", k, train.len())));
        }
        train = train.slice(0, k)?;
    }
    Ok(Splits { train, val, test })
}

pub fn load(dir: &Path, zca_eps: Option<f64>, train_size: Option<usize>) -> Result<Splits> {
    let (train, test) = load_raw(dir)?;
    prepare(train, test, zca_eps, train_size)
}
