//! Content loss built from self-similarity matrices: pairwise cosine
//! distances within one feature sample, column-normalized and compared
//! under L1.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureSample;
use crate::transport::cosine_costs;

/// Symmetric `n x n` cosine-distance matrix of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfSimMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SelfSimMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Differentiable pairwise cosine distances of `a: [n, D]` (uncentered).
pub fn self_sim_var(a: Var<'_>) -> Result<Var<'_>> {
    cosine_costs(a, a, false)
}

pub fn self_sim_matrix(a: &FeatureSample) -> Result<SelfSimMatrix> {
    let tape = Tape::new();
    let d = self_sim_var(tape.constant(a.vectors().clone()))?;
    let n = a.len();
    // Clamp rounding noise so the diagonal is exactly zero and entries stay
    // inside [0, 2].
    let mut data: Vec<f64> = d.value().data().iter().map(|v| v.clamp(0.0, 2.0)).collect();
    for i in 0..n {
        data[i * n + i] = 0.0;
    }
    Ok(SelfSimMatrix { n, data })
}

fn column_normalized<'t>(d: Var<'t>, which: &str) -> Result<Var<'t>> {
    let n = d.shape()[1];
    let sums = d.sum_axis(0)?;
    if let Some(j) = sums.value().data().iter().position(|&s| !(s.abs() > 1e-12)) {
        return Err(Error::Degenerate(format!(
            "column {j} of the {which} self-similarity matrix sums to zero"
        )));
    }
    d.div(sums.reshape(&[1, n])?)
}

/// `(1/n^2) sum_ij |D^O_ij / sum_i D^O_ij - D^C_ij / sum_i D^C_ij|` for
/// paired samples `o, c: [n, D]`.
pub fn content_loss_var<'t>(o: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    let (so, sc) = (o.shape(), c.shape());
    if so.len() != 2 || so[0] != sc[0] || so[0] == 0 {
        return Err(shape_err(format!("content loss needs paired samples, got {so:?} and {sc:?}")));
    }
    let a = column_normalized(self_sim_var(o)?, "output")?;
    let b = column_normalized(self_sim_var(c)?, "content")?;
    Ok(a.sub(b)?.abs().mean())
}

pub fn content_loss(o: &FeatureSample, c: &FeatureSample) -> Result<f64> {
    let tape = Tape::new();
    let v = content_loss_var(tape.constant(o.vectors().clone()), tape.constant(c.vectors().clone()))?;
    Ok(v.item())
}

/// Content loss straight from two precomputed distance matrices.
pub fn content_loss_from_matrices(o: &SelfSimMatrix, c: &SelfSimMatrix) -> Result<f64> {
    if o.n != c.n {
        return Err(shape_err("self-similarity matrices differ in size"));
    }
    let tape = Tape::new();
    let t = |m: &SelfSimMatrix| Tensor::new(vec![m.n, m.n], m.data.clone());
    let a = column_normalized(tape.constant(t(o)?), "output")?;
    let b = column_normalized(tape.constant(t(c)?), "content")?;
    Ok(a.sub(b)?.abs().mean().item())
}
