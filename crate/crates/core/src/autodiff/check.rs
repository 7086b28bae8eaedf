//! Central finite-difference gradient checks.

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Pins a closure to the higher-ranked signature the checks expect, so it
/// can be bound with `let` before use.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Compares reverse-mode gradients of the scalar objective `f` at `x` with
/// central differences over every coordinate.
///
/// Returns the largest `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, eps, &all)
}

/// Like [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(invalid("finite difference step must be positive"));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(invalid(format!("coordinate {c} out of range for {} values", x.len())));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = f(&tape, v)?;
        tape.backward(loss)?.wrt(v)
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(probe);
        Ok(f(&tape, v)?.item())
    };
    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += eps;
        let mut minus = x.clone();
        minus.data_mut()[c] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[c];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes() {
        let x = Tensor::from_vec(vec![-1.3, 0.4, 2.0]);
        let err = finite_diff_check(|_, v| Ok(v.square().mul(v)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_coordinates() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_check_coords(|_, v| Ok(v.sum()), &x, 1e-6, &[3]).is_err());
    }
}
