//! Central-difference gradient checking for tape-recorded functions.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Evaluates `f` on a fresh tape with `point[i]` registered as `ParamId(i)`.
fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = point
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i as u32), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, out))
}

fn scalar_of<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, out) = evaluate(f, point)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check", index: 0 });
    }
    Ok(v)
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, point, step, &coords)
}

/// Like [`grad_check`] but only over the listed `(tensor, element)` coordinates.
pub fn grad_check_coords<F>(f: F, point: &[Tensor], step: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", step)));
    }
    let (tape, out) = evaluate(&f, point)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for &(i, j) in coords {
        let analytic = grads.get(ParamId(i as u32)).map_or(0.0, |g| g.data()[j]);
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + step;
        let up = scalar_of(&f, &probe)?;
        probe[i].data_mut()[j] = orig - step;
        let down = scalar_of(&f, &probe)?;
        probe[i].data_mut()[j] = orig;
        let central = (up - down) / (2.0 * step);
        if !analytic.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", index: j });
        }
        worst = worst.max((analytic - central).abs() / central.abs().max(1.0));
    }
    Ok(worst)
}
