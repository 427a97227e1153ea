//! Monte-Carlo checks of the sampling distributions against closed forms, at
//! 10^5 draws and 3 standard errors.

use blrnet_core::arch::ModelSpec;
use blrnet_core::export::{export, ExportMode};
use blrnet_core::math::{gaussian_cdf_at_zero, sigmoid};
use blrnet_core::model::Model;
use blrnet_core::norm_pool::{pool_prob_mc, stoch_batchnorm, stoch_maxpool, BnMode, BnParams, PoolGeometry};
use blrnet_core::stochastic::{
    binarize, concrete_sample, sample_gaussian, sample_weights, BinaryActivationDistribution, BinaryWeightDistribution, GaussianActivation,
};
use blrnet_core::{RngStream, Tensor};

use super::Outcome;

pub const DRAWS: usize = 100_000;

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `|freq - p| <= 3 * sqrt(p (1 - p) / n)`.
fn binomial(name: &str, hits: usize, n: usize, p: f64) -> Check {
    let freq = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    ensure((freq - p).abs() <= 3.0 * se, || format!("{name}: frequency {freq} vs {p} (3 se = {})", 3.0 * se))
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

fn text<E: ToString>(e: E) -> String {
    e.to_string()
}

pub fn weight_signs() -> Outcome {
    for (logit, seed) in [(0.0, 1), (1.3, 2), (-2.9444389791664403, 3)] {
        let dist = BinaryWeightDistribution::new(Tensor::full(&[DRAWS], logit)).map_err(text)?;
        let w = sample_weights(&dist, &mut RngStream::new(seed));
        let minus = w.data().iter().filter(|&&v| v == -1.0).count();
        binomial("weights", minus, DRAWS, sigmoid(logit))?;
    }
    Ok("3 logits".into())
}

/// Sampled export of weights with `p(-1) = 0.05`.
pub fn sampled_export() -> Outcome {
    let spec = ModelSpec::parse("16FC-SM2", [1, 5, 5]).map_err(text)?;
    let mut model = Model::zeros(spec).map_err(text)?;
    let logit = (0.05f64 / 0.95).ln();
    let mut rng = RngStream::new(4);
    let mut minus = 0;
    let mut total = 0;
    while total < DRAWS {
        model.hidden[0].weight = Tensor::full(model.hidden[0].weight.shape(), logit);
        let net = export(&model, ExportMode::Sample, &mut rng).map_err(text)?;
        let w = net.stages[0].weights.data();
        minus += w.iter().filter(|&&v| v == -1.0).count();
        total += w.len();
    }
    binomial("export", minus, total, 0.05)?;
    Ok(format!("{:.4} over {total}", minus as f64 / total as f64))
}

pub fn binarization() -> Outcome {
    for (mu, var, seed) in [(0.0, 1.0, 5), (0.7, 2.0, 6), (-1.5, 0.5, 7)] {
        let ga = GaussianActivation::new(Tensor::full(&[DRAWS], mu), Tensor::full(&[DRAWS], var)).map_err(text)?;
        let q = binarize(&ga).map_err(text)?.q.data()[0];
        ensure((q - gaussian_cdf_at_zero(mu, var)).abs() < 1e-15, || format!("q {q} at ({mu}, {var})"))?;
        let s = sample_gaussian(&ga, &mut RngStream::new(seed));
        let negative = s.data().iter().filter(|&&v| v < 0.0).count();
        binomial("binarize", negative, DRAWS, q)?;
    }
    let ga = GaussianActivation::new(Tensor::full(&[DRAWS], 2.0), Tensor::full(&[DRAWS], 4.0)).map_err(text)?;
    let (m, _) = mean_and_var(sample_gaussian(&ga, &mut RngStream::new(8)).data());
    ensure((m - 2.0).abs() <= 3.0 * 2.0 / (DRAWS as f64).sqrt(), || format!("gaussian sample mean {m}"))?;
    Ok("3 gaussians".into())
}

pub fn concrete_low_temperature() -> Outcome {
    for (q, seed) in [(0.2, 9), (0.5, 10), (0.9, 11)] {
        let bad = BinaryActivationDistribution { q: Tensor::full(&[DRAWS], q) };
        let a = concrete_sample(&bad, 0.01, &mut RngStream::new(seed)).map_err(text)?;
        let positive = a.data().iter().filter(|&&v| v > 0.0).count();
        binomial("concrete", positive, DRAWS, 1.0 - q)?;
        ensure(a.data().iter().all(|v| v.abs() <= 1.0), || "sample outside [-1, 1]".into())?;
    }
    Ok("tau 0.01".into())
}

/// `DRAWS` independent 2x2 regions holding the same four distributions.
fn selection_counts(region: &[(f64, f64); 4], seed: u64) -> Result<[usize; 4], String> {
    let mean = Tensor::from_fn(&[DRAWS, 1, 2, 2], |i| region[i % 4].0);
    let var = Tensor::from_fn(&[DRAWS, 1, 2, 2], |i| region[i % 4].1);
    let ga = GaussianActivation::new(mean, var).map_err(text)?;
    let (out, idx) = stoch_maxpool(&ga, PoolGeometry::square(2), &mut RngStream::new(seed)).map_err(text)?;
    let mut counts = [0; 4];
    for (r, &i) in idx.iter().enumerate() {
        let k = i - 4 * r;
        counts[k] += 1;
        ensure((out.mean.data()[r], out.var.data()[r]) == region[k], || format!("region {r}: output is not element {k}"))?;
    }
    Ok(counts)
}

/// Elements that never win against the two under test.
const NEVER: (f64, f64) = (-1e6, 0.0);

pub fn maxpool() -> Outcome {
    let c = selection_counts(&[(0.0, 1.0), (0.0, 1.0), NEVER, NEVER], 12)?;
    binomial("symmetric pair", c[0], DRAWS, 0.5)?;
    ensure(c[0] + c[1] == DRAWS, || "symmetric pair: other element selected".into())?;

    let c = selection_counts(&[(0.0, 1.0), (1.0, 1.0), NEVER, NEVER], 13)?;
    binomial("shifted pair", c[1], DRAWS, 0.76025)?;
    let shifted = c[1] as f64 / DRAWS as f64;
    let rho = pool_prob_mc(&[(0.0, 1.0), (1.0, 1.0)], DRAWS, &mut RngStream::new(14)).map_err(text)?;
    binomial("pool_prob_mc", (rho[1] * DRAWS as f64).round() as usize, DRAWS, 0.76025)?;

    let mut worst_tv: f64 = 0.0;
    for (region, seed) in [
        ([(0.0, 1.0), (0.5, 0.25), (-0.3, 2.0), (0.2, 0.0)], 15),
        ([(1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0)], 16),
        ([(0.0, 4.0), (2.0, 0.1), (-1.0, 9.0), (0.5, 1.0)], 17),
    ] {
        let c = selection_counts(&region, seed)?;
        let rho = pool_prob_mc(&region, DRAWS, &mut RngStream::new(seed + 100)).map_err(text)?;
        ensure((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12, || "pool probabilities do not sum to 1".into())?;
        let tv: f64 = c.iter().zip(&rho).map(|(&k, r)| (k as f64 / DRAWS as f64 - r).abs()).sum::<f64>() / 2.0;
        ensure(tv < 0.02, || format!("total variation {tv}"))?;
        for k in 0..4 {
            let p = rho[k];
            // both frequencies carry sampling error
            let se = (p * (1.0 - p) * 2.0 / DRAWS as f64).sqrt();
            let f = c[k] as f64 / DRAWS as f64;
            ensure((f - p).abs() <= 3.0 * se + 1e-12, || format!("element {k}: {f} vs {p}"))?;
        }
        worst_tv = worst_tv.max(tv);
    }
    Ok(format!("shifted pair {shifted:.4} (0.76025), max total variation {worst_tv:.4}"))
}

/// One channel of `M` Gaussian pre-activations.
fn bn_input() -> GaussianActivation {
    let mu = [0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 3.0, -2.0];
    let var = [1.0, 0.25, 2.0, 0.5, 0.1, 1.5, 0.3, 0.8];
    GaussianActivation::new(Tensor::new(vec![8, 1], mu.to_vec()).unwrap(), Tensor::new(vec![8, 1], var.to_vec()).unwrap()).unwrap()
}

/// Batch statistics of sampled activations: the mean, and the squared
/// deviations from the expected mean over `M - 1`, average to the expected
/// statistics used by train-mode batch norm.
pub fn batchnorm_statistics() -> Outcome {
    let ga = bn_input();
    let mu = ga.mean.data();
    let m = mu.len() as f64;
    let em = mu.iter().sum::<f64>() / m;
    let ev = (ga.var.sum() + mu.iter().map(|x| (x - em) * (x - em)).sum::<f64>()) / (m - 1.0);
    let mut params = BnParams::new(1);
    params.momentum = 1.0;
    stoch_batchnorm(&ga, &mut params, BnMode::Train).map_err(text)?;
    ensure((params.running_mean.data()[0] - em).abs() < 1e-12, || "running mean".into())?;
    ensure((params.running_var.data()[0] - ev).abs() < 1e-12, || "running variance".into())?;

    let mut rng = RngStream::new(18);
    let mut means = Vec::with_capacity(DRAWS);
    let mut vars = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        let a = sample_gaussian(&ga, &mut rng);
        means.push(a.sum() / m);
        vars.push(a.data().iter().map(|x| (x - em) * (x - em)).sum::<f64>() / (m - 1.0));
    }
    for (name, xs, target) in [("mean", &means, em), ("variance", &vars, ev)] {
        let (avg, v) = mean_and_var(xs);
        let se = (v / DRAWS as f64).sqrt();
        ensure((avg - target).abs() <= 3.0 * se, || format!("{name}: {avg} vs {target} (3 se = {})", 3.0 * se))?;
    }
    Ok(format!("E[m] {em:.4}, E[v] {ev:.4}"))
}

/// Sampling the normalized Gaussians agrees with normalizing samples of the
/// input using the expected statistics.
pub fn batchnorm_sampling() -> Outcome {
    let ga = bn_input();
    let mut params = BnParams::new(1);
    params.gamma = Tensor::full(&[1], 1.7);
    params.beta = Tensor::full(&[1], -0.4);
    let mut stats = params.clone();
    stats.momentum = 1.0;
    let out = stoch_batchnorm(&ga, &mut stats, BnMode::Train).map_err(text)?;
    let (em, ev) = (stats.running_mean.data()[0], stats.running_var.data()[0]);
    let scale = 1.7 / (ev + params.eps).sqrt();
    let mut rng_a = RngStream::new(19);
    let mut rng_b = RngStream::new(20);
    for k in 0..ga.mean.len() {
        let mut lhs = Vec::with_capacity(DRAWS);
        let mut rhs = Vec::with_capacity(DRAWS);
        for _ in 0..DRAWS {
            lhs.push(out.mean.data()[k] + out.var.data()[k].sqrt() * rng_a.normal());
            let a = ga.mean.data()[k] + ga.var.data()[k].sqrt() * rng_b.normal();
            rhs.push(scale * (a - em) - 0.4);
        }
        let (ml, vl) = mean_and_var(&lhs);
        let (mr, vr) = mean_and_var(&rhs);
        let se = ((vl + vr) / DRAWS as f64).sqrt();
        ensure((ml - mr).abs() <= 3.0 * se, || format!("element {k}: means {ml} vs {mr}"))?;
        ensure((vl / vr - 1.0).abs() <= 0.05, || format!("element {k}: variances {vl} vs {vr}"))?;
    }

    let mut fixed = BnParams::new(1);
    fixed.running_mean = Tensor::full(&[1], 0.3);
    fixed.running_var = Tensor::full(&[1], 2.0);
    let a = stoch_batchnorm(&ga, &mut fixed.clone(), BnMode::Eval).map_err(text)?;
    let b = stoch_batchnorm(&ga, &mut fixed, BnMode::Eval).map_err(text)?;
    ensure(a == b, || "eval mode is not deterministic".into())?;
    Ok(format!("{} elements", ga.mean.len()))
}
