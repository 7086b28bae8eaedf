//! Square uniform-marginal EMD as a linear assignment problem.
//!
//! With `n = m` the transport polytope is `1/n` times the Birkhoff polytope,
//! whose vertices are permutations, so an optimal plan is a scaled
//! permutation. Solved by shortest augmenting paths with row and column
//! potentials in `O(n^3)`.

use super::emd::EmdSolution;
use super::{DistanceMatrix, TransportPlan};
use crate::error::{invalid, Result};

/// Optimal assignment of a square cost matrix, as an [`EmdSolution`].
///
/// `pivots` counts the Dijkstra column scans over all augmentations.
pub fn assignment_emd(c: &DistanceMatrix) -> Result<EmdSolution> {
    let n = c.rows();
    if c.cols() != n {
        return Err(invalid(format!("assignment needs a square matrix, got {n}x{}", c.cols())));
    }
    if c.forbidden().is_some() {
        return Err(invalid("assignment does not support forbidden entries"));
    }
    let a = c.data();
    // Column index n is the virtual start column.
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![usize::MAX; n + 1];
    let mut way = vec![n; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];
    let mut scans = 0;
    for i in 0..n {
        row_of[n] = i;
        let mut j0 = n;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            scans += 1;
            let i0 = row_of[j0];
            let row = &a[i0 * n..(i0 + 1) * n];
            let (mut delta, mut j1) = (f64::INFINITY, n);
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = row[j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == usize::MAX {
                break;
            }
        }
        while j0 != n {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    let share = 1.0 / n as f64;
    let mut flows = vec![0.0; n * n];
    let mut col_of = vec![0; n];
    for j in 0..n {
        col_of[row_of[j]] = j;
    }
    for (i, &j) in col_of.iter().enumerate() {
        flows[i * n + j] = share;
    }
    let cost = flows.iter().zip(a).map(|(t, c)| t * c).sum();
    v.truncate(n);
    Ok(EmdSolution { cost, plan: TransportPlan { rows: n, cols: n, flows }, row_duals: u, col_duals: v, pivots: scans })
}
