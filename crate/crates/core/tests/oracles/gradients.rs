//! Central-difference checks of every differentiable primitive, of a full
//! stochastic layer, and of the end-to-end training loss with frozen noise.

use blrnet_core::arch::ModelSpec;
use blrnet_core::gradcheck::grad_check;
use blrnet_core::linalg::ConvGeometry;
use blrnet_core::model::{Model, ParamSlot};
use blrnet_core::norm_pool::{self, BnMode, BnParams, PoolGeometry};
use blrnet_core::objective::{self, ObjectiveConfig, ObjectiveKind};
use blrnet_core::stochastic::{self, GaussianVars, LinearKind};
use blrnet_core::tape::ParamId;
use blrnet_core::{GradientMap, Result, RngStream, Tape, Tensor, Var};

use super::Outcome;

pub const TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;
const POINTS: u64 = 10;

type Checked = std::result::Result<f64, String>;
type Shapes<'a> = &'a [(&'a [usize], f64, f64)];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.uniform())
}

/// `sum(v * r)` for a fixed random `r`, so every output element carries a
/// distinct weight into the scalar being differentiated.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let r = uniform(tape.shape(v), -1.0, 1.0, &mut rng);
    let r = tape.constant(r)?;
    let p = tape.mul(v, r)?;
    tape.sum(p)
}

/// Worst relative error of `f` over [`POINTS`] random points.
fn check(name: &str, shapes: Shapes, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Checked {
    let mut worst: f64 = 0.0;
    for k in 0..POINTS {
        let mut rng = RngStream::new(1000 + k);
        let point: Vec<Tensor> = shapes.iter().map(|(s, lo, hi)| uniform(s, *lo, *hi, &mut rng)).collect();
        let err = grad_check(&f, &point, STEP).map_err(|e| format!("{name}: {e}"))?;
        if !(err < TOL) {
            return Err(format!("{name}: point {k} error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn unary(name: &str, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Result<Var>) -> Checked {
    check(name, &[(&[3, 4], lo, hi)], |t, v| {
        let y = op(t, v[0])?;
        project(t, y, 1)
    })
}

fn binary(name: &str, lo: f64, hi: f64, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Checked {
    check(name, &[(&[3, 4], -2.0, 2.0), (&[3, 4], lo, hi)], |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, 2)
    })
}

/// Every differentiable primitive of the tape.
pub fn primitives() -> Outcome {
    let mut errors: Vec<f64> = vec![
        unary("neg", -2.0, 2.0, Tape::neg)?,
        unary("recip", 0.5, 2.0, Tape::recip)?,
        unary("sigmoid", -4.0, 4.0, Tape::sigmoid)?,
        unary("exp", -2.0, 2.0, Tape::exp)?,
        unary("log", 0.2, 3.0, Tape::log)?,
        unary("sqrt", 0.2, 3.0, Tape::sqrt)?,
        unary("square", -2.0, 2.0, Tape::square)?,
        unary("tanh", -2.0, 2.0, Tape::tanh)?,
        binary("add", -2.0, 2.0, Tape::add)?,
        binary("sub", -2.0, 2.0, Tape::sub)?,
        binary("mul", -2.0, 2.0, Tape::mul)?,
        binary("div", 0.5, 2.0, Tape::div)?,
    ];
    errors.push(check("scale/add_scalar", &[(&[5], -2.0, 2.0)], |t, v| {
        let a = t.scale(v[0], -1.7)?;
        let b = t.add_scalar(a, 0.3)?;
        project(t, b, 3)
    })?);
    errors.push(check("clip", &[(&[6], -0.9, 0.9)], |t, v| {
        let y = t.clip(v[0], -1.0, 1.0)?;
        project(t, y, 4)
    })?);
    errors.push(check("gaussian_cdf_at_zero", &[(&[2, 3], -2.0, 2.0), (&[2, 3], 0.2, 3.0)], |t, v| {
        let y = t.gaussian_cdf_at_zero(v[0], v[1])?;
        project(t, y, 5)
    })?);
    for tau in [0.5, 1.0, 2.0] {
        errors.push(check("concrete", &[(&[8], 0.05, 0.95)], |t, v| {
            let noise = RngStream::new(6).logistics(8);
            let y = t.concrete(v[0], noise, tau)?;
            project(t, y, 6)
        })?);
    }
    errors.push(check("matmul", &[(&[3, 4], -1.0, 1.0), (&[4, 2], -1.0, 1.0)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 7)
    })?);
    errors.push(check("matmul_t", &[(&[3, 4], -1.0, 1.0), (&[5, 4], -1.0, 1.0)], |t, v| {
        let y = t.matmul_t(v[0], v[1])?;
        project(t, y, 8)
    })?);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        errors.push(check("conv2d", &[(&[2, 2, 5, 5], -1.0, 1.0), (&[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
            let y = t.conv2d(v[0], v[1], ConvGeometry { stride, padding })?;
            project(t, y, 9)
        })?);
    }
    errors.push(check("sum", &[(&[2, 3], -1.0, 1.0)], |t, v| {
        let s = t.sum(v[0])?;
        t.square(s)
    })?);
    errors.push(check("mean", &[(&[2, 3], -1.0, 1.0)], |t, v| {
        let s = t.mean(v[0])?;
        t.square(s)
    })?);
    errors.push(check("channel_sum", &[(&[2, 3, 2, 2], -1.0, 1.0)], |t, v| {
        let y = t.channel_sum(v[0])?;
        project(t, y, 10)
    })?);
    errors.push(check("channel_mean", &[(&[4, 3], -1.0, 1.0)], |t, v| {
        let y = t.channel_mean(v[0])?;
        project(t, y, 11)
    })?);
    errors.push(check("channel_var", &[(&[2, 3, 2, 2], -1.0, 1.0)], |t, v| {
        let y = t.channel_var(v[0])?;
        project(t, y, 12)
    })?);
    errors.push(check("channel_affine", &[(&[2, 3, 2, 2], -1.0, 1.0), (&[3], -2.0, 2.0), (&[3], -1.0, 1.0)], |t, v| {
        let y = t.channel_affine(v[0], Some(v[1]), Some(v[2]))?;
        project(t, y, 13)
    })?);
    errors.push(check("reshape/gather", &[(&[2, 6], -1.0, 1.0)], |t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        let g = t.gather(r, vec![0, 5, 5, 11, 2], &[5])?;
        project(t, g, 14)
    })?);
    errors.push(check("log_softmax_nll", &[(&[4, 5], -3.0, 3.0)], |t, v| t.log_softmax_nll(v[0], &[0, 4, 2, 2]))?);
    let bn = BnParams::new(3);
    errors.push(check(
        "batchnorm",
        &[(&[4, 3, 2, 2], -1.0, 1.0), (&[4, 3, 2, 2], 0.1, 1.0), (&[3], 0.5, 1.5), (&[3], -0.5, 0.5)],
        |t, v| {
            let (m, var, _) = norm_pool::batchnorm_tape(t, v[0], Some(v[1]), v[2], v[3], &bn, BnMode::Train)?;
            let a = project(t, m, 15)?;
            let b = project(t, var.expect("variance propagated"), 16)?;
            t.add(a, b)
        },
    )?);
    errors.push(check("variance regularizer", &[(&[3, 2], -3.0, 3.0), (&[4], -3.0, 3.0)], |t, v| {
        objective::variance_regularizer_tape(t, &[v[0], v[1]])
    })?);
    errors.push(check("entropy", &[(&[3, 2], -3.0, 3.0)], |t, v| objective::entropy_term_tape(t, &[v[0]]))?);
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Ok(format!("{} checks, max error {worst:.1e}", errors.len()))
}

/// Weight moments, CLT pre-activations, batch norm, stochastic max pooling,
/// binarization and the Concrete relaxation composed into one loss.
pub fn composed_layer() -> Outcome {
    let bn = BnParams::new(2);
    let layer = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut rng = RngStream::new(77);
        let (wm, wv) = stochastic::weight_moments_tape(t, v[1])?;
        let g = stochastic::clt_forward_tape(t, v[0], wm, wv, LinearKind::Conv2d(ConvGeometry { stride: 1, padding: 1 }), None)?;
        let (m, var, _) = norm_pool::batchnorm_tape(t, g.mean, Some(g.var), v[2], v[3], &bn, BnMode::Train)?;
        let g = GaussianVars { mean: m, var: var.expect("variance propagated") };
        let (g, _) = norm_pool::stoch_maxpool_tape(t, g, PoolGeometry::square(2), &mut rng)?;
        let q = stochastic::binarize_tape(t, g)?;
        let a = stochastic::concrete_sample_tape(t, q, 1.0, &mut rng)?;
        project(t, a, 17)
    };
    let worst = check(
        "layer",
        &[(&[3, 2, 4, 4], -1.0, 1.0), (&[2, 2, 3, 3], -2.0, 2.0), (&[2], 0.5, 1.5), (&[2], -0.5, 0.5)],
        layer,
    )?;
    Ok(format!("max error {worst:.1e}"))
}

/// Training loss of a small binary network against central differences over
/// 50 weight logits, with the noise stream reset for every evaluation.
pub fn end_to_end() -> Outcome {
    let spec = ModelSpec::parse("4C3-MP2-16FC-SM3", [1, 6, 6]).unwrap().with_bias(true);
    let mut worst: f64 = 0.0;
    for kind in [ObjectiveKind::VarianceRegularized, ObjectiveKind::VariationalBound] {
        let model = blrnet_core::train::xavier_init(&spec, 5).map_err(|e| e.to_string())?;
        let cfg = ObjectiveConfig {
            beta_var: 1e-2,
            kind,
            train_size: 10,
            ..ObjectiveConfig::default()
        };
        let mut data_rng = RngStream::new(8);
        let x = Tensor::from_fn(&[6, 1, 6, 6], |_| data_rng.normal());
        let y = [0usize, 1, 2, 0, 1, 2];
        let loss = |m: &Model| -> Result<(f64, GradientMap)> {
            let mut tape = Tape::new();
            let f = m.forward(&mut tape, &x, BnMode::Train, 1.0, &mut RngStream::new(99))?;
            let (l, _) = objective::build_loss(&mut tape, &f, &y, m.mode(), &cfg)?;
            Ok((tape.value(l).item()?, tape.backward(l)?))
        };
        let (_, grads) = loss(&model).map_err(|e| e.to_string())?;
        let stages = model.hidden.len();
        let mut pick = RngStream::new(3);
        for _ in 0..50 {
            let i = pick.below(stages);
            let id: ParamId = ParamSlot::Weight(i).id(stages);
            let j = pick.below(model.hidden[i].weight.len());
            let analytic = grads.get(id).ok_or("missing weight gradient")?.data()[j];
            let h = 1e-5;
            let mut up = model.clone();
            up.hidden[i].weight.data_mut()[j] += h;
            let mut down = model.clone();
            down.hidden[i].weight.data_mut()[j] -= h;
            let fd = (loss(&up).map_err(|e| e.to_string())?.0 - loss(&down).map_err(|e| e.to_string())?.0) / (2.0 * h);
            let err = (analytic - fd).abs() / fd.abs().max(1.0);
            if !(err < END_TO_END_TOL) {
                return Err(format!("{kind:?}: stage {i} logit {j}: analytic {analytic} vs {fd}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("2 objectives x 50 logits, max error {worst:.1e}"))
}
