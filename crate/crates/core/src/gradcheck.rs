//! Finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
/// Rounding noise of a central difference is about `ε·|f|/h`, roughly
/// `1e-10` for a multitask loss near 5 at `h = 1e-5`. A relative tolerance of
/// `1e-4` can only be met for entries well above `1e-6`, so smaller ones are
/// held to `1e-4 · REL_FLOOR = 1e-9` absolute instead.
pub const REL_FLOOR: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences and returns the largest relative error over all entries.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(shape_err!("grad_check: function must return a scalar"));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over a whole list of parameter tensors at once: `f`
/// receives one tape variable per tensor. Every entry of every tensor is
/// checked unless `stride > 1`, in which case every `stride`-th entry is.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], stride: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.len()])
        })
        .collect();

    let eval = |ts: Vec<Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.into_iter().map(|t| tape.constant(t)).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).item())
    };

    let stride = stride.max(1);
    let mut worst = 0.0f64;
    let mut counter = 0usize;
    for (j, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            counter += 1;
            if counter % stride != 0 {
                continue;
            }
            let mut plus = xs.to_vec();
            plus[j].data_mut()[i] += FD_STEP;
            let mut minus = xs.to_vec();
            minus[j].data_mut()[i] -= FD_STEP;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j][i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);

        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
