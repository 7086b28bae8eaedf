//! Dense two-phase tableau simplex for small transport problems, kept as an
//! independent cross-check of the network solver.

use super::{DistanceMatrix, TransportPlan};
use crate::error::{invalid, Error, Result};

const MAX_SIDE: usize = 32;

struct Tableau {
    rows: usize,
    /// Width excluding the right-hand side column.
    vars: usize,
    t: Vec<f64>,
    z: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * (self.vars + 1) + c]
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let w = self.vars + 1;
        let p = self.at(r, col);
        for c in 0..w {
            self.t[r * w + c] /= p;
        }
        let prow: Vec<f64> = self.t[r * w..(r + 1) * w].to_vec();
        for rr in 0..self.rows {
            if rr == r {
                continue;
            }
            let f = self.t[rr * w + col];
            if f != 0.0 {
                for c in 0..w {
                    self.t[rr * w + c] -= f * prow[c];
                }
            }
        }
        let f = self.z[col];
        if f != 0.0 {
            for c in 0..w {
                self.z[c] -= f * prow[c];
            }
        }
        self.basis[r] = col;
    }

    /// Bland's rule: lowest-index improving column, ratio ties broken by
    /// lowest basic variable index.
    fn run(&mut self, allowed: &dyn Fn(usize) -> bool, tol: f64) -> Result<()> {
        loop {
            let Some(col) = (0..self.vars).find(|&j| allowed(j) && self.z[j] < -tol) else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, col);
                if a > tol {
                    let ratio = self.at(r, self.vars) / a;
                    let better = match best {
                        None => true,
                        Some((br, bv)) => ratio < bv - tol || (ratio <= bv + tol && self.basis[r] < self.basis[br]),
                    };
                    if better {
                        best = Some((r, ratio));
                    }
                }
            }
            let (r, _) = best.ok_or_else(|| Error::Degenerate("unbounded transport LP".into()))?;
            self.pivot(r, col);
        }
    }
}

/// Exact uniform-marginal EMD by a dense two-phase simplex.
/// Limited to `n, m <= 32`.
pub fn dense_lp_emd(c: &DistanceMatrix) -> Result<(f64, TransportPlan)> {
    let (n, m) = (c.rows(), c.cols());
    if n > MAX_SIDE || m > MAX_SIDE {
        return Err(invalid(format!("dense LP oracle is limited to {MAX_SIDE}x{MAX_SIDE}")));
    }
    let nm = n * m;
    let rows = n + m;
    let vars = nm + rows;
    let w = vars + 1;
    let mut t = vec![0.0; rows * w];
    for i in 0..n {
        for j in 0..m {
            t[i * w + i * m + j] = 1.0;
            t[(n + j) * w + i * m + j] = 1.0;
        }
        t[i * w + vars] = 1.0 / n as f64;
    }
    for j in 0..m {
        t[(n + j) * w + vars] = 1.0 / m as f64;
    }
    for r in 0..rows {
        t[r * w + nm + r] = 1.0;
    }
    // Phase one: minimize the artificial sum.
    let mut z = vec![0.0; w];
    for r in 0..rows {
        for col in 0..w {
            if col < nm || col == vars {
                z[col] -= t[r * w + col];
            }
        }
    }
    let mut tab = Tableau { rows, vars, t, z, basis: (nm..vars).collect() };
    let tol = 1e-12;
    let admissible = |j: usize| j < nm && !c.is_forbidden(j / m, j % m);
    tab.run(&|j| admissible(j) || j >= nm, tol)?;
    if -tab.z[vars] > 1e-9 {
        return Err(Error::Infeasible("forbidden entries leave no feasible transport plan".into()));
    }
    // Drive zero-level artificials out of the basis where possible; rows
    // where that fails are redundant.
    for r in 0..rows {
        if tab.basis[r] >= nm {
            if let Some(col) = (0..nm).find(|&j| admissible(j) && tab.at(r, j).abs() > 1e-9) {
                tab.pivot(r, col);
            }
        }
    }
    // Phase two objective in reduced form.
    let cost = |j: usize| if j < nm { c.data()[j] } else { 0.0 };
    let mut z = vec![0.0; w];
    for (j, zj) in z.iter_mut().enumerate().take(vars) {
        *zj = cost(j);
    }
    for r in 0..rows {
        let cb = cost(tab.basis[r]);
        if cb != 0.0 {
            for (col, zc) in z.iter_mut().enumerate() {
                *zc -= cb * tab.at(r, col);
            }
        }
    }
    tab.z = z;
    tab.run(&admissible, tol)?;
    let mut flows = vec![0.0; nm];
    for r in 0..rows {
        if tab.basis[r] < nm {
            flows[tab.basis[r]] = tab.at(r, vars).max(0.0);
        }
    }
    let plan = TransportPlan { rows: n, cols: m, flows };
    Ok((plan.cost(c), plan))
}
