//! Bit-packed binary inference.
//!
//! `±1` values are stored one bit per element (`1` for `+1`), row-major and
//! least-significant bit first within each `u64` word; padding bits are 0.
//! Dot products of packed vectors are `2 * popcount(xnor(a, b)) - n`.
//! Batch norm, bias and sign binarization of every binary stage are folded
//! into one integer comparison per channel, so hidden stages run entirely
//! on integers. The first stage (real inputs) and the softmax layer run in
//! floating point with the same code as the reference forward pass.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::StageLinear;
use crate::error::{Error, Result};
use crate::export::{bn_affine, bn_coefficients, softmax_layer, stage_forward, DeterministicBinaryNet};
use crate::norm_pool::{BnParams, PoolGeometry};
use crate::tensor::Tensor;

const WORD: usize = 64;

fn words_for(n: usize) -> usize {
    n.div_ceil(WORD)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    words: Vec<u64>,
    len: usize,
    shape: Vec<usize>,
}

impl BitTensor {
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Value of element `i` as `±1`.
    pub fn get(&self, i: usize) -> i8 {
        if self.words[i / WORD] >> (i % WORD) & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

fn pack_signs(values: impl Iterator<Item = bool>, len: usize) -> Vec<u64> {
    let mut words = vec![0u64; words_for(len)];
    for (i, plus) in values.enumerate() {
        if plus {
            words[i / WORD] |= 1 << (i % WORD);
        }
    }
    words
}

/// Packs a tensor whose elements are all `+1` or `-1`.
pub fn pack(x: &Tensor) -> Result<BitTensor> {
    if let Some(i) = x.data().iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Domain {
            op: "pack",
            detail: alloc::format!("element {} is {} rather than +-1", i, x.data()[i]),
        });
    }
    Ok(BitTensor {
        words: pack_signs(x.data().iter().map(|&v| v > 0.0), x.len()),
        len: x.len(),
        shape: x.shape().to_vec(),
    })
}

pub fn unpack(b: &BitTensor) -> Tensor {
    Tensor::new(b.shape.clone(), (0..b.len).map(|i| f64::from(b.get(i))).collect()).expect("shape matches length")
}

/// `sum a_i b_i` of two packed `±1` vectors of `n` elements.
#[inline]
fn dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let full = n / WORD;
    let mut agree: u32 = 0;
    for k in 0..full {
        agree += (!(a[k] ^ b[k])).count_ones();
    }
    let rest = n % WORD;
    if rest != 0 {
        let mask = (1u64 << rest) - 1;
        agree += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    2 * i64::from(agree) - n as i64
}

/// Integer dot product of two packed vectors of equal length.
pub fn xnor_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    if a.len != b.len {
        return Err(Error::ShapeMismatch {
            op: "xnor_dot",
            lhs: vec![a.len],
            rhs: vec![b.len],
        });
    }
    Ok(dot_words(&a.words, &b.words, a.len))
}

/// Batch norm followed by sign binarization as a per-channel threshold on
/// the pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdBN {
    /// `t = mean - beta * sqrt(var + eps) / gamma`.
    pub threshold: Vec<f64>,
    /// `gamma > 0`: fire for `a >= t`; otherwise fire for `a <= t`.
    pub direction: Vec<bool>,
    /// For `gamma == 0`: the constant output `beta >= 0`.
    pub constant: Vec<Option<bool>>,
}

impl ThresholdBN {
    /// Whether channel `c` outputs `+1` for pre-activation `a`.
    pub fn fires(&self, c: usize, a: f64) -> bool {
        if let Some(k) = self.constant[c] {
            return k;
        }
        if self.direction[c] {
            a >= self.threshold[c]
        } else {
            a <= self.threshold[c]
        }
    }
}

/// Folds eval-mode batch norm and `b_det` into thresholds.
pub fn fold_bn(p: &BnParams) -> ThresholdBN {
    let c = p.channels();
    let mut out = ThresholdBN {
        threshold: Vec::with_capacity(c),
        direction: Vec::with_capacity(c),
        constant: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
        let (m, v) = (p.running_mean.data()[ch], p.running_var.data()[ch]);
        if g == 0.0 {
            out.threshold.push(0.0);
            out.direction.push(true);
            out.constant.push(Some(b >= 0.0));
        } else {
            out.threshold.push(m - b * libm::sqrt(v + p.eps) / g);
            out.direction.push(g > 0.0);
            out.constant.push(None);
        }
    }
    out
}

/// Exact integer form of a stage's bias, batch norm and sign for integer
/// pre-activations in `[-n, n]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntDecision {
    /// `+1` iff `a >= cutoff`.
    AtLeast(i64),
    /// `+1` iff `a <= cutoff`.
    AtMost(i64),
    Constant(bool),
}

impl IntDecision {
    #[inline]
    pub fn fires(self, a: i64) -> bool {
        match self {
            IntDecision::AtLeast(t) => a >= t,
            IntDecision::AtMost(t) => a <= t,
            IntDecision::Constant(k) => k,
        }
    }

    /// Whether pooling should take the minimum rather than the maximum.
    fn pools_min(self) -> bool {
        matches!(self, IntDecision::AtMost(_))
    }
}

/// Finds the cutoff of `f(a) >= 0` over integers in `[-n, n]` by bisection
/// on the exact float expression, which is monotone in `a` because every
/// rounding step is.
fn integer_cutoffs(n: i64, bias: f64, coef: Option<(f64, f64, f64)>) -> IntDecision {
    let f = |a: i64| {
        let x = a as f64 + bias;
        match coef {
            Some((m, s, b)) => bn_affine(x, m, s, b),
            None => x,
        }
    };
    let increasing = match coef {
        Some((_, s, _)) if s == 0.0 => return IntDecision::Constant(f(0) >= 0.0),
        Some((_, s, _)) => s > 0.0,
        None => true,
    };
    if increasing {
        // smallest a with f(a) >= 0, n + 1 if none
        let (mut lo, mut hi) = (-n, n + 1);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if f(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        IntDecision::AtLeast(lo)
    } else {
        // largest a with f(a) >= 0, -n - 1 if none
        let (mut lo, mut hi) = (-n - 1, n);
        while lo < hi {
            let mid = lo + (hi - lo + 1) / 2;
            if f(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        IntDecision::AtMost(lo)
    }
}

#[derive(Clone, Debug)]
enum BitLayer {
    Conv {
        /// `[out][ky][kx][channel words]`.
        filters: Vec<u64>,
        in_channels: usize,
        channel_words: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        in_hw: (usize, usize),
        pool: Option<PoolGeometry>,
        decisions: Vec<IntDecision>,
    },
    Dense {
        /// `[out][words]`.
        rows: Vec<u64>,
        in_features: usize,
        out_features: usize,
        decisions: Vec<IntDecision>,
    },
}

/// A deterministic network compiled for bit-packed inference.
#[derive(Clone, Debug)]
pub struct BitNet {
    net: DeterministicBinaryNet,
    layers: Vec<BitLayer>,
    warnings: Vec<String>,
}

/// Logits of a bit-packed forward pass plus diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct BitOutput {
    pub logits: Tensor,
    pub warnings: Vec<String>,
    /// Integer pre-activations of every integer stage, `[N, C, H, W]`
    /// flattened, when requested.
    pub trace: Vec<Vec<i64>>,
}

fn stage_decisions(d: &crate::export::DetStage, channels: usize, fan_in: usize) -> Vec<IntDecision> {
    let coef = d.bn.as_ref().map(bn_coefficients);
    (0..channels)
        .map(|c| {
            let bias = d.bias.as_ref().map_or(0.0, |b| b.data()[c]);
            integer_cutoffs(fan_in as i64, bias, coef.as_ref().map(|v| v[c]))
        })
        .collect()
}

impl BitNet {
    pub fn compile(net: &DeterministicBinaryNet) -> Result<Self> {
        let mut layers = Vec::new();
        for (st, d) in net.plan().stages.iter().zip(&net.stages).skip(1) {
            let w = d.weights.data();
            let decisions = stage_decisions(d, st.channels(), st.fan_in());
            match st.linear {
                StageLinear::Conv { in_channels, out_channels, kernel, geom } => {
                    if geom.stride != 1 {
                        return Err(Error::Architecture("bit-packed convolution supports stride 1 only".into()));
                    }
                    let cw = words_for(in_channels);
                    let mut filters = vec![0u64; out_channels * kernel * kernel * cw];
                    for o in 0..out_channels {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let base = ((o * kernel + ky) * kernel + kx) * cw;
                                for c in 0..in_channels {
                                    if w[((o * in_channels + c) * kernel + ky) * kernel + kx] > 0.0 {
                                        filters[base + c / WORD] |= 1 << (c % WORD);
                                    }
                                }
                            }
                        }
                    }
                    layers.push(BitLayer::Conv {
                        filters,
                        in_channels,
                        channel_words: cw,
                        out_channels,
                        kernel,
                        padding: geom.padding,
                        in_hw: (st.in_shape[1], st.in_shape[2]),
                        pool: st.pool,
                        decisions,
                    });
                }
                StageLinear::Dense { in_features, out_features } => {
                    let ww = words_for(in_features);
                    let mut rows = vec![0u64; out_features * ww];
                    for o in 0..out_features {
                        let packed = pack_signs(w[o * in_features..(o + 1) * in_features].iter().map(|&v| v > 0.0), in_features);
                        rows[o * ww..(o + 1) * ww].copy_from_slice(&packed);
                    }
                    layers.push(BitLayer::Dense {
                        rows,
                        in_features,
                        out_features,
                        decisions,
                    });
                }
            }
        }
        let mut warnings = Vec::new();
        if !net.bn_reestimated && net.stages.iter().any(|s| s.bn.is_some()) {
            warnings.push(String::from("batch-norm statistics were not re-estimated after export"));
        }
        Ok(Self {
            net: net.clone(),
            layers,
            warnings,
        })
    }

    pub fn net(&self) -> &DeterministicBinaryNet {
        &self.net
    }

    pub fn forward(&self, x: &Tensor) -> Result<BitOutput> {
        self.run(x, false)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<BitOutput> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor, keep_trace: bool) -> Result<BitOutput> {
        let net = &self.net;
        let n = net.check_input(x)?;
        let mut trace: Vec<Vec<i64>> = vec![Vec::new(); self.layers.len()];
        let h = if net.stages.is_empty() {
            x.data().to_vec()
        } else {
            let mut none = None;
            stage_forward::<f64>(net, 0, x.data(), n, &mut none, None)?
        };
        if self.layers.is_empty() {
            let logits = softmax_layer(net, &h, n)?;
            return Ok(BitOutput { logits, warnings: self.warnings.clone(), trace });
        }
        let first_out = net.plan().stages[0].out_shape;
        let per_image = first_out.iter().product::<usize>();
        let last_len = net.plan().softmax_in;
        let mut features = Vec::with_capacity(n * last_len);
        for img in 0..n {
            // +-1 activations of the current image, CHW
            let mut act: Vec<bool> = h[img * per_image..(img + 1) * per_image].iter().map(|&v| v > 0.0).collect();
            let mut shape = first_out;
            for (li, layer) in self.layers.iter().enumerate() {
                let (ints, out) = self.layer_forward(layer, &act, shape);
                if keep_trace {
                    trace[li].extend_from_slice(&ints);
                }
                act = out.0;
                shape = out.1;
            }
            features.extend(act.iter().map(|&p| if p { 1.0 } else { -1.0 }));
        }
        let logits = softmax_layer(net, &features, n)?;
        Ok(BitOutput {
            logits,
            warnings: self.warnings.clone(),
            trace,
        })
    }

    /// One integer stage on one image: returns the integer pre-activations
    /// and the binarized (pooled) output with its shape.
    fn layer_forward(&self, layer: &BitLayer, act: &[bool], shape: [usize; 3]) -> (Vec<i64>, (Vec<bool>, [usize; 3])) {
        match layer {
            BitLayer::Conv {
                filters,
                in_channels,
                channel_words,
                out_channels,
                kernel,
                padding,
                in_hw,
                pool,
                decisions,
            } => {
                let (h, w) = *in_hw;
                let (c, cw, k, pad) = (*in_channels, *channel_words, *kernel, *padding);
                debug_assert_eq!(shape, [c, h, w]);
                // pixel-major packing: [y][x][channel words]
                let mut pix = vec![0u64; h * w * cw];
                for ch in 0..c {
                    for p in 0..h * w {
                        if act[ch * h * w + p] {
                            pix[p * cw + ch / WORD] |= 1 << (ch % WORD);
                        }
                    }
                }
                let mut ints = vec![0i64; out_channels * h * w];
                for o in 0..*out_channels {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = 0i64;
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let p = (iy - pad) * w + (ix - pad);
                                    let f = ((o * k + ky) * k + kx) * cw;
                                    acc += dot_words(&pix[p * cw..(p + 1) * cw], &filters[f..f + cw], c);
                                }
                            }
                            ints[(o * h + oy) * w + ox] = acc;
                        }
                    }
                }
                let out = match pool {
                    None => (
                        ints.iter().enumerate().map(|(i, &a)| decisions[i / (h * w)].fires(a)).collect(),
                        [*out_channels, h, w],
                    ),
                    Some(g) => {
                        let (oh, ow) = g.output_hw(h, w).expect("planned");
                        let mut out = Vec::with_capacity(out_channels * oh * ow);
                        for o in 0..*out_channels {
                            let d = decisions[o];
                            let plane = &ints[o * h * w..(o + 1) * h * w];
                            for py in 0..oh {
                                for px in 0..ow {
                                    let mut best = plane[py * g.stride * w + px * g.stride];
                                    for dy in 0..g.window {
                                        for dx in 0..g.window {
                                            let v = plane[(py * g.stride + dy) * w + px * g.stride + dx];
                                            best = if d.pools_min() { best.min(v) } else { best.max(v) };
                                        }
                                    }
                                    out.push(d.fires(best));
                                }
                            }
                        }
                        (out, [*out_channels, oh, ow])
                    }
                };
                (ints, out)
            }
            BitLayer::Dense {
                rows,
                in_features,
                out_features,
                decisions,
            } => {
                let nin = *in_features;
                let ww = words_for(nin);
                let x = pack_signs(act.iter().copied(), nin);
                let ints: Vec<i64> = (0..*out_features).map(|o| dot_words(&x, &rows[o * ww..(o + 1) * ww], nin)).collect();
                let out = ints.iter().enumerate().map(|(o, &a)| decisions[o].fires(a)).collect();
                (ints, (out, [*out_features, 1, 1]))
            }
        }
    }
}

/// Compiles `net` and runs a bit-packed forward pass.
pub fn bit_forward(net: &DeterministicBinaryNet, x: &Tensor) -> Result<BitOutput> {
    BitNet::compile(net)?.forward(x)
}
