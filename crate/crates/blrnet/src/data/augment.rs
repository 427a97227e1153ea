//! Random translations and horizontal flips.

use blrnet_core::rng::RngStream;
use blrnet_core::train::Augment;

/// Shifts every channel by `(dy, dx)` pixels, filling with zeros.
pub fn translate(image: &mut [f64], shape: [usize; 3], dy: i64, dx: i64) {
    if dy == 0 && dx == 0 {
        return;
    }
    let [c, h, w] = shape;
    let src = image.to_vec();
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    src[ch * h * w + sy as usize * w + sx as usize]
                } else {
                    0.0
                };
                image[ch * h * w + y as usize * w + x as usize] = v;
            }
        }
    }
}

pub fn flip_horizontal(image: &mut [f64], shape: [usize; 3]) {
    let [_, _, w] = shape;
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// Translation uniform in `[-max_shift, max_shift]` per axis and a
/// horizontal flip with probability 1/2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftFlip {
    pub max_shift: i64,
}

impl Default for ShiftFlip {
    fn default() -> Self {
        Self { max_shift: 4 }
    }
}

impl ShiftFlip {
    /// `(dy, dx, flip)` for one image.
    pub fn sample(&self, rng: &mut RngStream) -> (i64, i64, bool) {
        let dy = rng.int_inclusive(-self.max_shift, self.max_shift);
        let dx = rng.int_inclusive(-self.max_shift, self.max_shift);
        (dy, dx, rng.bernoulli(0.5))
    }
}

impl Augment for ShiftFlip {
    fn apply(&self, image: &mut [f64], shape: [usize; 3], rng: &mut RngStream) {
        let (dy, dx, flip) = self.sample(rng);
        translate(image, shape, dy, dx);
        if flip {
            flip_horizontal(image, shape);
        }
    }
}
