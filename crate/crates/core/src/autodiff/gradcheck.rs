//! Central finite-difference checks for tape gradients (64-bit).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evaluates the scalar graph built by `f` on `x`.
pub fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut x = x.clone();
    x.set_requires_grad(false);
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Gradient of the scalar graph built by `f`, via [`Tape::backward`].
pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    Ok(tape.grad_or_zeros(xv))
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`, over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// As [`finite_diff_check`], restricted to the given coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
