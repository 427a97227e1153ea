//! The bit-packed engine against the float reference on random exported
//! networks, including the integer pre-activations of every binary stage.

use blrnet_core::arch::ModelSpec;
use blrnet_core::bitpack::{pack, xnor_dot, BitNet};
use blrnet_core::export::{det_forward, det_forward_traced, export, reestimate_bn, ExportMode};
use blrnet_core::model::Model;
use blrnet_core::train::argmax_rows;
use blrnet_core::{RngStream, Tensor};

use super::Outcome;

pub const LOGIT_TOL: f64 = 1e-9;

/// A random architecture with 2 to 4 binary layers of width at most 64.
fn random_arch(rng: &mut RngStream) -> (String, [usize; 3]) {
    let input = [1 + rng.below(3), 4 + rng.below(5), 4 + rng.below(5)];
    let layers = 2 + rng.below(3);
    let convs = rng.below(layers + 1);
    let mut side = input[1].min(input[2]);
    let mut tokens = Vec::new();
    for _ in 0..convs {
        tokens.push(format!("{}C{}", 1 + rng.below(64), [1, 3, 5][rng.below(3)]));
        if side >= 4 && rng.bernoulli(0.5) {
            tokens.push("MP2".into());
            side /= 2;
        }
    }
    for _ in convs..layers {
        tokens.push(format!("{}FC", 1 + rng.below(64)));
    }
    tokens.push(format!("SM{}", 2 + rng.below(9)));
    (tokens.join("-"), input)
}

fn random_model(rng: &mut RngStream) -> Model {
    let (arch, input) = random_arch(rng);
    let batch_norm = rng.bernoulli(0.8);
    let bias = !batch_norm || rng.bernoulli(0.3);
    let spec = ModelSpec::parse(&arch, input).unwrap().with_batch_norm(batch_norm).with_bias(bias);
    let mut m = Model::zeros(spec).unwrap();
    // integer statistics put pre-activations exactly on thresholds
    let integral = rng.bernoulli(0.3);
    for h in &mut m.hidden {
        h.weight = Tensor::from_fn(h.weight.shape(), |_| 2.0 * rng.normal());
        if let Some(b) = &mut h.bias {
            *b = Tensor::from_fn(b.shape(), |_| if integral { rng.int_inclusive(-3, 3) as f64 } else { rng.normal() });
        }
        if let Some(bn) = &mut h.bn {
            let c = bn.channels();
            bn.gamma = Tensor::from_fn(&[c], |_| match rng.below(10) {
                0 => 0.0,
                1 | 2 => -0.5 - rng.uniform(),
                _ => 0.5 + rng.uniform(),
            });
            bn.beta = Tensor::from_fn(&[c], |_| if integral { 0.0 } else { 0.5 * rng.normal() });
            bn.running_mean = Tensor::from_fn(&[c], |_| if integral { rng.int_inclusive(-4, 4) as f64 } else { 3.0 * rng.normal() });
            bn.running_var = Tensor::from_fn(&[c], |_| 0.1 + 10.0 * rng.uniform());
        }
    }
    m.softmax_weight = Tensor::from_fn(m.softmax_weight.shape(), |_| rng.normal());
    m.softmax_bias = Tensor::from_fn(m.softmax_bias.shape(), |_| rng.normal());
    m
}

/// `nets` random exported networks, each on 10 random inputs: identical
/// argmax, logits within [`LOGIT_TOL`], identical integer pre-activations,
/// and a warning exactly when batch-norm statistics were never re-estimated.
pub fn random_nets(nets: usize, seed: u64) -> Outcome {
    let mut rng = RngStream::new(seed);
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for k in 0..nets {
        let model = random_model(&mut rng);
        let mut net = export(&model, ExportMode::Sample, &mut rng).map_err(|e| e.to_string())?;
        let [c, h, w] = model.spec().input;
        if model.spec().batch_norm && rng.bernoulli(0.5) {
            let batches: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[8, c, h, w], |_| rng.normal())).collect();
            reestimate_bn(&mut net, &batches, None).map_err(|e| e.to_string())?;
        }
        let x = Tensor::from_fn(&[10, c, h, w], |_| rng.normal());
        let reference = det_forward(&net, &x).map_err(|e| e.to_string())?;
        let (_, trace) = det_forward_traced(&net, &x).map_err(|e| e.to_string())?;
        let bit = BitNet::compile(&net).and_then(|b| b.forward_traced(&x)).map_err(|e| e.to_string())?;
        let arch = model.spec().arch_string();
        if argmax_rows(&bit.logits) != argmax_rows(&reference) {
            return Err(format!("net {k} ({arch}): predictions differ"));
        }
        let diff = bit.logits.max_abs_diff(&reference);
        if !(diff <= LOGIT_TOL) {
            return Err(format!("net {k} ({arch}): logits differ by {diff:e}"));
        }
        worst = worst.max(diff);
        if bit.warnings.is_empty() != (net.bn_reestimated || !model.spec().batch_norm) {
            return Err(format!("net {k} ({arch}): warnings {:?}", bit.warnings));
        }
        for (s, ints) in bit.trace.iter().enumerate() {
            let stage = s + 1;
            let linear = &trace.linear[stage];
            let plane = linear.len() / (10 * model.hidden[stage].weight.shape()[0]);
            for (i, (&a, &f)) in ints.iter().zip(linear.data()).enumerate() {
                let bias = net.stages[stage].bias.as_ref().map_or(0.0, |b| b.data()[(i / plane) % b.len()]);
                if a != (f - bias).round() as i64 || !((f - bias - a as f64).abs() < 1e-9) {
                    return Err(format!("net {k} ({arch}) stage {stage} element {i}: {a} vs {}", f - bias));
                }
            }
            compared += ints.len();
        }
    }
    if compared == 0 {
        return Err("no binary stage compared".into());
    }
    Ok(format!("{nets} nets, {compared} integer pre-activations, max logit difference {worst:.1e}"))
}

/// XNOR-popcount dot products against float dot products of random sign
/// vectors of length 1 to 500.
pub fn xnor_pairs(pairs: usize, seed: u64) -> Outcome {
    let mut rng = RngStream::new(seed);
    for k in 0..pairs {
        let n = 1 + rng.below(500);
        let a = Tensor::from_fn(&[n], |_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 });
        let b = Tensor::from_fn(&[n], |_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 });
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let got = xnor_dot(&pack(&a).map_err(|e| e.to_string())?, &pack(&b).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if got as f64 != dot {
            return Err(format!("pair {k} (length {n}): {got} vs {dot}"));
        }
    }
    Ok(format!("{pairs} pairs"))
}
