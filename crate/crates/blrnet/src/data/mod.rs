//! Dataset loading, normalization, whitening and augmentation.

pub mod augment;
pub mod cifar;
pub mod mnist;
pub mod zca;

use std::path::{Path, PathBuf};

use blrnet_core::dataset::Dataset;

use crate::error::{Error, Result};

/// Environment variable naming the dataset root when no directory is
/// given explicitly.
pub const DATA_DIR_ENV: &str = "BLRNET_DATA_DIR";

/// The dataset root: the explicit directory if given, else
/// `$BLRNET_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Train / validation / test split of one benchmark.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Per-channel `(mean, std)` over every pixel of every image.
pub fn channel_moments(ds: &Dataset) -> Vec<(f64, f64)> {
    let [c, h, w] = ds.shape();
    let plane = h * w;
    (0..c)
        .map(|ch| {
            let vals = || (0..ds.len()).flat_map(move |i| ds.image(i)[ch * plane..(ch + 1) * plane].iter().copied());
            let n = (ds.len() * plane) as f64;
            let mean = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// `(x - mean) / std` per channel.
pub fn normalize_channels(ds: &mut Dataset, moments: &[(f64, f64)]) {
    let [c, h, w] = ds.shape();
    let plane = h * w;
    for i in 0..ds.len() {
        let img = ds.image_mut(i);
        for ch in 0..c {
            let (m, s) = moments[ch];
            for v in &mut img[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
}
