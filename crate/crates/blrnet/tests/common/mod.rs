//! Synthetic MNIST-format data for tests.

#![allow(dead_code)]

use std::path::Path;

use blrnet::data::mnist::{encode_idx, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, VALIDATION_SIZE};

/// 28x28 images whose label is marked by a bright 7x7 block at one of ten
/// positions, over seeded noise.
pub fn synthetic_images(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = (next() % 10) as usize;
        let (by, bx) = (7 * (label / 4) + 1, 7 * (label % 4));
        for y in 0..28 {
            for x in 0..28 {
                let noise = (next() % 64) as u8;
                let on = (by..by + 7).contains(&y) && (bx..bx + 7).contains(&x);
                images.push(if on { 191 + noise } else { noise });
            }
        }
        labels.push(label as u8);
    }
    (images, labels)
}

/// Writes an MNIST directory with `train` training images beyond the
/// validation carve-out and `test` test images.
pub fn write_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let (im, lb) = synthetic_images(train + VALIDATION_SIZE, 1);
    let (im, lb) = encode_idx(&im, &lb, 28, 28);
    std::fs::write(dir.join(TRAIN_IMAGES), im).unwrap();
    std::fs::write(dir.join(TRAIN_LABELS), lb).unwrap();
    let (im, lb) = synthetic_images(test, 2);
    let (im, lb) = encode_idx(&im, &lb, 28, 28);
    std::fs::write(dir.join(TEST_IMAGES), im).unwrap();
    std::fs::write(dir.join(TEST_LABELS), lb).unwrap();
}
