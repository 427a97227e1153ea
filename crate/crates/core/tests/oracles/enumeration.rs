//! CLT moments against exhaustive enumeration of every weight assignment.

use blrnet_core::linalg::ConvGeometry;
use blrnet_core::math::sigmoid;
use blrnet_core::stochastic::{clt_forward, BinaryWeightDistribution, LinearKind};
use blrnet_core::{RngStream, Tensor};

use super::Outcome;

pub const TOL: f64 = 1e-10;

/// Exact mean and variance of every output of `z = f(B, h)` by summing over
/// all `2^n` assignments of the weights, each weighted by its probability.
pub fn enumerate(h: &Tensor, logits: &Tensor, kind: LinearKind) -> (Vec<f64>, Vec<f64>) {
    let n = logits.len();
    assert!(n <= 16);
    let p_minus: Vec<f64> = logits.data().iter().map(|&l| sigmoid(l)).collect();
    let mut first: Option<(Vec<f64>, Vec<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let mut prob = 1.0;
        let w: Vec<f64> = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    prob *= p_minus[i];
                    -1.0
                } else {
                    prob *= 1.0 - p_minus[i];
                    1.0
                }
            })
            .collect();
        let w = Tensor::new(logits.shape().to_vec(), w).unwrap();
        let z = match kind {
            LinearKind::Dense => blrnet_core::linalg::matmul_t(h, &w).unwrap(),
            LinearKind::Conv2d(g) => blrnet_core::linalg::conv2d(h, &w, g).unwrap(),
        };
        let (m1, m2) = first.get_or_insert_with(|| (vec![0.0; z.len()], vec![0.0; z.len()]));
        for (k, &v) in z.data().iter().enumerate() {
            m1[k] += prob * v;
            m2[k] += prob * v * v;
        }
    }
    let (m1, m2) = first.unwrap();
    let var = m1.iter().zip(&m2).map(|(a, b)| b - a * a).collect();
    (m1, var)
}

/// Largest deviation of `clt_forward` from enumeration on one layer.
pub fn layer_error(h: &Tensor, logits: &Tensor, kind: LinearKind) -> Result<f64, String> {
    let dist = BinaryWeightDistribution::new(logits.clone()).map_err(|e| e.to_string())?;
    let ga = clt_forward(h, &dist, kind).map_err(|e| e.to_string())?;
    let (mean, var) = enumerate(h, logits, kind);
    let mut worst: f64 = 0.0;
    for k in 0..mean.len() {
        worst = worst.max((ga.mean.data()[k] - mean[k]).abs()).max((ga.var.data()[k] - var[k]).abs());
    }
    Ok(worst)
}

/// A random dense or convolutional layer with at most 12 weights.
pub fn random_layer(rng: &mut RngStream) -> (Tensor, Tensor, LinearKind) {
    if rng.bernoulli(0.5) {
        let batch = 1 + rng.below(3);
        let inputs = 1 + rng.below(4);
        let outputs = (1 + rng.below(3)).min(12 / inputs);
        let h = Tensor::from_fn(&[batch, inputs], |_| 6.0 * rng.uniform() - 3.0);
        let w = Tensor::from_fn(&[outputs, inputs], |_| 8.0 * rng.uniform() - 4.0);
        (h, w, LinearKind::Dense)
    } else {
        let channels = 1 + rng.below(2);
        let kernel = if channels == 1 && rng.bernoulli(0.5) { 3 } else { 2 };
        let outputs = if kernel == 2 { 1 + rng.below(3 / channels) } else { 1 };
        let side = 3 + rng.below(2);
        let padding = rng.below(2);
        let h = Tensor::from_fn(&[1 + rng.below(2), channels, side, side], |_| 4.0 * rng.uniform() - 2.0);
        let w = Tensor::from_fn(&[outputs, channels, kernel, kernel], |_| 8.0 * rng.uniform() - 4.0);
        (h, w, LinearKind::Conv2d(ConvGeometry { stride: 1, padding }))
    }
}

/// `count` random layers, each within [`TOL`] of enumeration.
pub fn random_layers(count: usize, seed: u64) -> Outcome {
    let mut rng = RngStream::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let (h, w, kind) = random_layer(&mut rng);
        assert!(w.len() <= 12);
        let e = layer_error(&h, &w, kind)?;
        if !(e <= TOL) {
            return Err(format!("layer {i} ({kind:?}, weights {:?}): error {e:e}", w.shape()));
        }
        worst = worst.max(e);
    }
    Ok(format!("{count} layers, max error {worst:.1e}"))
}
