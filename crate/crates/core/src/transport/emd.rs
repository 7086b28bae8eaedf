//! Exact uniform-marginal EMD by the transportation network simplex.
//!
//! Rows carry mass `1/n` and columns `1/m`. Masses are scaled to the
//! integers `m/g` and `n/g` (`g = gcd(n, m)`) so flows pivot exactly.
//! The basis is a spanning tree over row and column nodes, seeded by the
//! northwest-corner rule. Entering arcs come from block pricing (most
//! negative reduced cost within a rotating block of candidates). After a run
//! of degenerate pivots the solver switches to Bland's rule (lowest index
//! with negative reduced cost, leaving arc lowest index among ties) until
//! the objective strictly improves again, so it cannot cycle. Pure Bland
//! pricing is available through [`exact_emd_with`].

use super::assignment::assignment_emd;
use super::{DistanceMatrix, TransportPlan};
use crate::error::{Error, Result};

/// Largest `n * m` accepted by [`exact_emd`].
pub const MAX_EMD_ENTRIES: usize = 2048 * 2048;

#[derive(Clone, Debug)]
pub struct EmdSolution {
    pub cost: f64,
    pub plan: TransportPlan,
    /// Dual potentials with `u_i + v_j <= C_ij`, equality on the support.
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
    pub pivots: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Tree {
    /// CSR adjacency over nodes `0..n` (rows) and `n..n+m` (columns).
    start: Vec<usize>,
    adj: Vec<(usize, usize)>,
    parent: Vec<usize>,
    parent_cell: Vec<usize>,
    depth: Vec<usize>,
    pot: Vec<f64>,
    queue: Vec<usize>,
}

impl Tree {
    fn new(nodes: usize) -> Self {
        Self {
            start: vec![0; nodes + 1],
            adj: Vec::with_capacity(2 * nodes),
            parent: vec![usize::MAX; nodes],
            parent_cell: vec![usize::MAX; nodes],
            depth: vec![0; nodes],
            pot: vec![0.0; nodes],
            queue: Vec::with_capacity(nodes),
        }
    }

    /// Rebuilds parent links and potentials from the basis cells.
    fn rebuild(&mut self, basis: &[usize], cost: &[f64], n: usize, m: usize) {
        let nodes = n + m;
        self.start.iter_mut().for_each(|s| *s = 0);
        for &k in basis {
            self.start[k / m + 1] += 1;
            self.start[n + k % m + 1] += 1;
        }
        for v in 0..nodes {
            self.start[v + 1] += self.start[v];
        }
        self.adj.clear();
        self.adj.resize(self.start[nodes], (0, 0));
        let mut fill = self.start.clone();
        for &k in basis {
            let (r, c) = (k / m, n + k % m);
            self.adj[fill[r]] = (c, k);
            fill[r] += 1;
            self.adj[fill[c]] = (r, k);
            fill[c] += 1;
        }
        self.parent.iter_mut().for_each(|p| *p = usize::MAX);
        self.queue.clear();
        self.queue.push(0);
        self.parent[0] = 0;
        self.depth[0] = 0;
        self.pot[0] = 0.0;
        let mut head = 0;
        while head < self.queue.len() {
            let v = self.queue[head];
            head += 1;
            for e in self.start[v]..self.start[v + 1] {
                let (w, k) = self.adj[e];
                if self.parent[w] != usize::MAX {
                    continue;
                }
                self.parent[w] = v;
                self.parent_cell[w] = k;
                self.depth[w] = self.depth[v] + 1;
                // u_i + v_j = c_ij along every tree arc
                self.pot[w] = cost[k] - self.pot[v];
                self.queue.push(w);
            }
        }
        debug_assert_eq!(self.queue.len(), nodes, "basis must span all nodes");
    }
}

/// Entering-arc selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pricing {
    /// Block search with a Bland fallback during degenerate stalls.
    Block,
    /// Bland's rule throughout.
    Bland,
}

/// Solves the uniform-marginal transport problem exactly.
///
/// Square problems without a mask go to [`assignment_emd`]; the rest use
/// the network simplex. Forbidden entries are priced prohibitively; if
/// every optimal plan must use one, the mask is infeasible and an error is
/// returned.
pub fn exact_emd(c: &DistanceMatrix) -> Result<EmdSolution> {
    if c.rows() == c.cols() && c.forbidden().is_none() && c.rows() * c.cols() <= MAX_EMD_ENTRIES {
        return assignment_emd(c);
    }
    exact_emd_with(c, Pricing::Block)
}

/// [`exact_emd`] with an explicit pricing rule.
pub fn exact_emd_with(c: &DistanceMatrix, pricing: Pricing) -> Result<EmdSolution> {
    let (n, m) = (c.rows(), c.cols());
    if n.saturating_mul(m) > MAX_EMD_ENTRIES {
        return Err(Error::TooLarge(format!("{n}x{m} exceeds the {MAX_EMD_ENTRIES}-entry exact solver cap")));
    }
    let g = gcd(n, m);
    let (supply, demand) = ((m / g) as i64, (n / g) as i64);
    let total = (n / g * m) as f64;

    let max_c = c.data().iter().fold(0.0f64, |a, &b| a.max(b));
    // One integer unit of flow on a forbidden arc costs more than any
    // admissible plan.
    let big = (max_c + 1.0) * total + 1.0;
    let cost: Vec<f64> = (0..n * m)
        .map(|k| if c.is_forbidden(k / m, k % m) { big } else { c.data()[k] })
        .collect();
    let tol = 1e-12 * cost.iter().fold(1.0f64, |a, &b| a.max(b));

    // Northwest corner: exactly n + m - 1 cells, some possibly at zero flow.
    let mut flow = vec![0i64; n * m];
    let mut basic = vec![false; n * m];
    let mut basis = Vec::with_capacity(n + m - 1);
    {
        let (mut i, mut j) = (0, 0);
        let (mut si, mut dj) = (supply, demand);
        loop {
            let k = i * m + j;
            let x = si.min(dj);
            flow[k] = x;
            basic[k] = true;
            basis.push(k);
            si -= x;
            dj -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if si == 0 && i < n - 1 {
                i += 1;
                si = supply;
            } else {
                j += 1;
                dj = demand;
            }
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    let mut tree = Tree::new(n + m);
    let mut pivots = 0usize;
    let mut path_a = Vec::new();
    let mut path_b = Vec::new();
    let nm = n * m;
    let block = ((nm as f64).sqrt() as usize).max(n + m).min(nm);
    let stall_limit = n + m;
    let mut cursor = 0usize;
    let mut degenerate_run = 0usize;
    loop {
        tree.rebuild(&basis, &cost, n, m);
        let reduced = |k: usize| cost[k] - tree.pot[k / m] - tree.pot[n + k % m];
        let bland = pricing == Pricing::Bland || degenerate_run >= stall_limit;
        let entering = if bland {
            (0..nm).find(|&k| !basic[k] && reduced(k) < -tol)
        } else {
            let mut best: Option<(usize, f64)> = None;
            let mut scanned = 0;
            while scanned < nm {
                let end = (scanned + block).min(nm);
                for off in scanned..end {
                    let k = (cursor + off) % nm;
                    if basic[k] {
                        continue;
                    }
                    let r = reduced(k);
                    if r < -tol && best.is_none_or(|(_, b)| r < b) {
                        best = Some((k, r));
                    }
                }
                scanned = end;
                if best.is_some() {
                    break;
                }
            }
            cursor = (cursor + scanned) % nm;
            best.map(|(k, _)| k)
        };
        let Some(enter) = entering else { break };
        pivots += 1;

        // Tree path between row p and column q, each half listed upward.
        let (mut a, mut b) = (enter / m, n + enter % m);
        path_a.clear();
        path_b.clear();
        while tree.depth[a] > tree.depth[b] {
            path_a.push(tree.parent_cell[a]);
            a = tree.parent[a];
        }
        while tree.depth[b] > tree.depth[a] {
            path_b.push(tree.parent_cell[b]);
            b = tree.parent[b];
        }
        while a != b {
            path_a.push(tree.parent_cell[a]);
            a = tree.parent[a];
            path_b.push(tree.parent_cell[b]);
            b = tree.parent[b];
        }
        // Cycle: enter (+), path_b upward, path_a downward; signs alternate.
        let cycle: Vec<usize> = path_b.iter().copied().chain(path_a.iter().rev().copied()).collect();
        let mut theta = i64::MAX;
        let mut leave = usize::MAX;
        for (t, &k) in cycle.iter().enumerate() {
            if t % 2 == 0 && (flow[k] < theta || (flow[k] == theta && k < leave)) {
                theta = flow[k];
                leave = k;
            }
        }
        if theta == 0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        flow[enter] += theta;
        for (t, &k) in cycle.iter().enumerate() {
            if t % 2 == 0 {
                flow[k] -= theta;
            } else {
                flow[k] += theta;
            }
        }
        basic[enter] = true;
        basic[leave] = false;
        let slot = basis.iter().position(|&k| k == leave).expect("leaving cell is basic");
        basis[slot] = enter;
    }

    if (0..n * m).any(|k| flow[k] > 0 && c.is_forbidden(k / m, k % m)) {
        return Err(Error::Infeasible("forbidden entries leave no feasible transport plan".into()));
    }
    let flows: Vec<f64> = flow.iter().map(|&x| x as f64 / total).collect();
    let cost_val = flows.iter().zip(c.data()).map(|(t, c)| t * c).sum();
    Ok(EmdSolution {
        cost: cost_val,
        plan: TransportPlan { rows: n, cols: m, flows },
        row_duals: tree.pot[..n].to_vec(),
        col_duals: tree.pot[n..].to_vec(),
        pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Metric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut impl Rng) -> DistanceMatrix {
        DistanceMatrix::new(n, m, (0..n * m).map(|_| rng.random()).collect(), Metric::Cosine).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hand_cases() {
        let c = DistanceMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], Metric::Cosine).unwrap();
        let s = exact_emd(&c).unwrap();
        assert_eq!(s.cost, 0.0);
        assert_eq!(s.plan.flows, vec![0.5, 0.0, 0.0, 0.5]);
        let c = DistanceMatrix::from_rows(&[vec![0.2, 0.5], vec![0.4, 0.1]], Metric::Cosine).unwrap();
        let s = exact_emd(&c).unwrap();
        // 0.5 * 0.2 + 0.5 * 0.1 rounds to the double just above 0.15
        assert!((s.cost - 0.15).abs() <= 0.15 * f64::EPSILON);
        assert_eq!(s.plan.flows, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn pricing_rules_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, m) = (rng.random_range(1..=20), rng.random_range(1..=20));
            let c = random(n, m, &mut rng);
            let a = exact_emd_with(&c, Pricing::Block).unwrap().cost;
            let b = exact_emd_with(&c, Pricing::Bland).unwrap().cost;
            assert!((a - b).abs() < 1e-12);
        }
        // fully degenerate: all costs equal
        let c = DistanceMatrix::new(16, 16, vec![0.5; 256], Metric::Cosine).unwrap();
        assert!((exact_emd(&c).unwrap().cost - 0.5).abs() < 1e-12);
    }

    #[test]
    fn square_instances_match_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            for _ in 0..5 {
                let c = random(n, n, &mut rng);
                let best = permutations(n)
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / n as f64)
                    .fold(f64::INFINITY, f64::min);
                let s = exact_emd(&c).unwrap();
                assert!((s.cost - best).abs() < 1e-12, "n={n}: {} vs {best}", s.cost);
            }
        }
    }

    #[test]
    fn marginals_and_complementary_slackness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, m) in [(3, 7), (10, 4), (12, 18), (1, 5), (9, 1)] {
            let c = random(n, m, &mut rng);
            let s = exact_emd(&c).unwrap();
            for r in s.plan.row_sums() {
                assert!((r - 1.0 / n as f64).abs() < 1e-9);
            }
            for col in s.plan.col_sums() {
                assert!((col - 1.0 / m as f64).abs() < 1e-9);
            }
            let mut dual = 0.0;
            for i in 0..n {
                dual += s.row_duals[i] / n as f64;
                for j in 0..m {
                    let slack = c.get(i, j) - s.row_duals[i] - s.col_duals[j];
                    assert!(slack > -1e-9, "dual infeasible at ({i},{j}): {slack}");
                    if s.plan.get(i, j) > 0.0 {
                        assert!(slack.abs() < 1e-9);
                    }
                }
            }
            dual += s.col_duals.iter().sum::<f64>() / m as f64;
            assert!((dual - s.cost).abs() < 1e-9);
        }
    }

    #[test]
    fn forbidden_entries_are_avoided_or_reported() {
        let c = DistanceMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], Metric::Cosine)
            .unwrap()
            .with_forbidden(vec![true, false, false, false])
            .unwrap();
        let s = exact_emd(&c).unwrap();
        assert_eq!(s.cost, 1.0);
        assert_eq!(s.plan.get(0, 0), 0.0);

        let c = DistanceMatrix::from_rows(&[vec![0.1, 0.2]], Metric::Cosine)
            .unwrap()
            .with_forbidden(vec![true, false])
            .unwrap();
        assert!(matches!(exact_emd(&c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn size_cap() {
        let c = DistanceMatrix::new(2049, 2048, vec![0.0; 2049 * 2048], Metric::Cosine).unwrap();
        assert!(matches!(exact_emd(&c), Err(Error::TooLarge(_))));
    }
}
