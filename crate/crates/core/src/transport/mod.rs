//! Ground metrics, the relaxed earth mover's distance, moment and palette
//! losses, guidance-modified costs, and an exact transport solver.
//!
//! Every loss has a differentiable form operating on tape variables and a
//! plain form on [`FeatureSample`]s / [`DistanceMatrix`] values that records
//! a throwaway tape internally.

mod assignment;
mod emd;
mod guidance;
mod lp;

pub use assignment::assignment_emd;
pub use emd::{exact_emd, exact_emd_with, EmdSolution, Pricing, MAX_EMD_ENTRIES};
pub use guidance::{apply_guidance_costs, expand_point_guidance, guidance_mask, GridGuidance, PointPair};
pub use lp::dense_lp_emd;

use crate::autodiff::{Extremum, Tape, Tensor, Var};
use crate::color::OPPONENT;
use crate::error::{invalid, shape_err, Error, Result};
use crate::features::FeatureSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Dense `n x m` ground costs. Entries excluded by guidance carry a flag
/// rather than an infinite cost.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    forbidden: Option<Vec<bool>>,
    metric: Metric,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, metric: Metric) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(shape_err(format!("{rows}x{cols} cost matrix with {} entries", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("costs must be finite and nonnegative, got {v}")));
        }
        Ok(Self { rows, cols, data, forbidden: None, metric })
    }

    pub fn from_rows(rows: &[Vec<f64>], metric: Metric) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("ragged cost rows"));
        }
        Self::new(rows.len(), m, rows.concat(), metric)
    }

    pub fn with_forbidden(mut self, forbidden: Vec<bool>) -> Result<Self> {
        if forbidden.len() != self.data.len() {
            return Err(shape_err("forbidden mask does not match cost matrix"));
        }
        self.forbidden = forbidden.iter().any(|&f| f).then_some(forbidden);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.forbidden.as_ref().is_some_and(|f| f[i * self.cols + j])
    }

    pub fn forbidden(&self) -> Option<&[bool]> {
        self.forbidden.as_deref()
    }

    pub fn transpose(&self) -> Self {
        let t = |v: &[f64]| crate::autodiff::transpose(v, self.rows, self.cols);
        Self {
            rows: self.cols,
            cols: self.rows,
            data: t(&self.data),
            forbidden: self.forbidden.as_ref().map(|f| {
                let mut out = vec![false; f.len()];
                for i in 0..self.rows {
                    for j in 0..self.cols {
                        out[j * self.rows + i] = f[i * self.cols + j];
                    }
                }
                out
            }),
            metric: self.metric,
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("consistent dims")
    }
}

/// Dense `n x m` flows of a transport solution.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub flows: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.flows.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.flows.chunks_exact(self.cols) {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        s
    }

    pub fn cost(&self, c: &DistanceMatrix) -> f64 {
        self.flows.iter().zip(c.data()).map(|(t, c)| t * c).sum()
    }
}

/// Mean and biased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub mean: Vec<f64>,
    /// Row-major `D x D`.
    pub cov: Vec<f64>,
}

pub fn moment_stats(a: &FeatureSample) -> MomentStats {
    let (n, d) = (a.len(), a.dim());
    let x = a.vectors().data();
    let mut mean = vec![0.0; d];
    for r in x.chunks_exact(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in x.chunks_exact(d) {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    MomentStats { mean, cov }
}

/// Guidance applied to a cost variable: optional per-entry weights and
/// entries excluded from every minimum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostMask {
    pub weights: Option<Vec<f64>>,
    pub forbidden: Option<Vec<bool>>,
}

impl CostMask {
    pub fn is_empty(&self) -> bool {
        self.weights.is_none() && self.forbidden.is_none()
    }
}

fn unit_rows<'t>(a: Var<'t>, center: bool) -> Result<Var<'t>> {
    let s = a.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(shape_err(format!("expected a nonempty [n, D] sample, got {s:?}")));
    }
    let a = if center { a.sub(a.mean_axis(0)?.reshape(&[1, s[1]])?)? } else { a };
    let norms = a.square().sum_axis(1)?.sqrt()?;
    if let Some(i) = norms.value().data().iter().position(|&v| !(v >= 1e-12)) {
        return Err(Error::Degenerate(format!("feature vector {i} has (near) zero norm")));
    }
    a.div(norms.reshape(&[s[0], 1])?)
}

/// Cosine distances `1 - cos(a_i, b_j)`, optionally after subtracting each
/// sample's own mean vector.
pub fn cosine_costs<'t>(a: Var<'t>, b: Var<'t>, center: bool) -> Result<Var<'t>> {
    if a.shape().get(1) != b.shape().get(1) {
        return Err(shape_err(format!("feature dims differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (an, bn) = (unit_rows(a, center)?, unit_rows(b, center)?);
    Ok(an.matmul(bn.transpose()?)?.neg().offset(1.0))
}

/// Euclidean distances `||a_i - b_j||`.
pub fn euclidean_costs<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(shape_err(format!("cannot compare samples {sa:?} and {sb:?}")));
    }
    let d = a.reshape(&[sa[0], 1, sa[1]])?.sub(b.reshape(&[1, sb[0], sb[1]])?)?;
    d.square().sum_axis(2)?.sqrt()
}

/// Result of a relaxed EMD evaluation with the selected minima exposed for
/// instrumentation.
pub struct Remd<'t> {
    pub loss: Var<'t>,
    pub r_a: f64,
    pub r_b: f64,
    /// Column chosen by each row minimum.
    pub row_argmin: Vec<usize>,
    /// Row chosen by each column minimum.
    pub col_argmin: Vec<usize>,
}

/// `max(mean_i min_j C_ij, mean_j min_i C_ij)` with guidance applied.
pub fn remd_var<'t>(c: Var<'t>, mask: &CostMask) -> Result<Remd<'t>> {
    let s = c.shape();
    if s.len() != 2 {
        return Err(shape_err(format!("cost matrix must be 2-D, got {s:?}")));
    }
    let c = match &mask.weights {
        Some(w) => c.mul(c.tape().constant(Tensor::new(s.clone(), w.clone())?))?,
        None => c,
    };
    let forbidden = mask.forbidden.as_deref();
    let no_admissible = |_| Error::Infeasible("a row or column of the cost matrix is entirely forbidden".into());
    let (rmin, row_argmin) = c.extremum_axis(Extremum::Min, 1, forbidden).map_err(no_admissible)?;
    let (cmin, col_argmin) = c.extremum_axis(Extremum::Min, 0, forbidden).map_err(no_admissible)?;
    let (ra, rb) = (rmin.mean(), cmin.mean());
    let (r_a, r_b) = (ra.item(), rb.item());
    Ok(Remd { loss: ra.maximum(rb)?, r_a, r_b, row_argmin, col_argmin })
}

/// Relaxed EMD of a cost matrix.
pub fn remd(c: &DistanceMatrix) -> Result<f64> {
    let tape = Tape::new();
    let mask = CostMask { weights: None, forbidden: c.forbidden.clone() };
    Ok(remd_var(tape.constant(c.to_tensor()), &mask)?.loss.item())
}

/// `(1/d)|mu_a - mu_b|_1 + (1/d^2)|Sigma_a - Sigma_b|_1` with biased
/// covariances.
pub fn moment_loss_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[0] == 0 || sb[0] == 0 {
        return Err(shape_err(format!("moment loss needs matching [n, D] samples, got {sa:?} and {sb:?}")));
    }
    let d = sa[1] as f64;
    let stats = |x: Var<'t>, n: usize| -> Result<(Var<'t>, Var<'t>)> {
        let mu = x.mean_axis(0)?;
        let xc = x.sub(mu.reshape(&[1, sa[1]])?)?;
        let cov = xc.transpose()?.matmul(xc)?.scale(1.0 / n as f64);
        Ok((mu, cov))
    };
    let (ma, ca) = stats(a, sa[0])?;
    let (mb, cb) = stats(b, sb[0])?;
    let tm = ma.sub(mb)?.abs().sum().scale(1.0 / d);
    let tc = ca.sub(cb)?.abs().sum().scale(1.0 / (d * d));
    tm.add(tc)
}

pub fn moment_loss(a: &FeatureSample, b: &FeatureSample) -> Result<f64> {
    let tape = Tape::new();
    Ok(moment_loss_var(tape.constant(a.vectors().clone()), tape.constant(b.vectors().clone()))?.item())
}

/// RGB rows `[n, 3]` mapped to the opponent basis.
pub fn opponent_rows<'t>(rgb: Var<'t>) -> Result<Var<'t>> {
    let mut mt = vec![0.0; 9];
    for (r, row) in OPPONENT.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            mt[c * 3 + r] = *v;
        }
    }
    rgb.matmul(rgb.tape().constant(Tensor::new(vec![3, 3], mt)?))
}

/// Relaxed EMD between pixel colors in opponent space under the Euclidean
/// metric. Inputs are RGB rows `[n, 3]` and `[m, 3]`.
pub fn palette_loss_var<'t>(out: Var<'t>, style: Var<'t>) -> Result<Var<'t>> {
    if out.shape().get(1) != Some(&3) || style.shape().get(1) != Some(&3) {
        return Err(shape_err("palette loss needs [n, 3] pixel rows"));
    }
    let c = euclidean_costs(opponent_rows(out)?, opponent_rows(style)?)?;
    Ok(remd_var(c, &CostMask::default())?.loss)
}

pub fn palette_loss(out: &[[f64; 3]], style: &[[f64; 3]]) -> Result<f64> {
    let rows = |p: &[[f64; 3]]| Tensor::new(vec![p.len(), 3], p.concat());
    let tape = Tape::new();
    Ok(palette_loss_var(tape.constant(rows(out)?), tape.constant(rows(style)?))?.item())
}

fn matrix_of(v: Var<'_>, metric: Metric) -> Result<DistanceMatrix> {
    let s = v.shape();
    let data = v.value().data().iter().map(|&x| x.max(0.0)).collect();
    DistanceMatrix::new(s[0], s[1], data, metric)
}

pub fn cosine_distance_matrix(a: &FeatureSample, b: &FeatureSample, center: bool) -> Result<DistanceMatrix> {
    let tape = Tape::new();
    let v = cosine_costs(tape.constant(a.vectors().clone()), tape.constant(b.vectors().clone()), center)?;
    matrix_of(v, Metric::Cosine)
}

pub fn euclidean_distance_matrix(a: &FeatureSample, b: &FeatureSample) -> Result<DistanceMatrix> {
    let tape = Tape::new();
    let v = euclidean_costs(tape.constant(a.vectors().clone()), tape.constant(b.vectors().clone()))?;
    matrix_of(v, Metric::Euclidean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, objective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> FeatureSample {
        FeatureSample::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_sample(n: usize, d: usize, rng: &mut impl Rng) -> FeatureSample {
        let r: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        FeatureSample::from_rows(&r).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cosine_examples() {
        let c = cosine_distance_matrix(&rows(&[&[1.0, 0.0]]), &rows(&[&[0.0, 1.0]]), false).unwrap();
        assert_eq!(c.data(), &[1.0]);
        let c = cosine_distance_matrix(&rows(&[&[1.0, 0.0]]), &rows(&[&[3.0, 0.0]]), false).unwrap();
        assert_eq!(c.data(), &[0.0]);
        let c = cosine_distance_matrix(&rows(&[&[1.0, 1.0], &[1.0, 0.0]]), &rows(&[&[0.0, 1.0]]), false).unwrap();
        close(c.get(0, 0), 1.0 - 0.5f64.sqrt(), 1e-12);
        close(c.get(1, 0), 1.0, 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let e = cosine_distance_matrix(&rows(&[&[0.0, 0.0]]), &rows(&[&[1.0, 0.0]]), false);
        assert!(matches!(e, Err(Error::Degenerate(_))));
        // a single vector centers to zero
        let e = cosine_distance_matrix(&rows(&[&[1.0, 2.0]]), &rows(&[&[1.0, 0.0], &[0.0, 1.0]]), true);
        assert!(e.is_err());
    }

    #[test]
    fn centered_cosine_uses_each_samples_mean() {
        let a = rows(&[&[1.0, 0.0], &[3.0, 0.0]]);
        let b = rows(&[&[0.0, 5.0], &[0.0, 7.0]]);
        let c = cosine_distance_matrix(&a, &b, true).unwrap();
        // centered: a = (-1,0),(1,0); b = (0,-1),(0,1): all orthogonal
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn euclidean_examples() {
        let c = euclidean_distance_matrix(&rows(&[&[0.5, 0.25]]), &rows(&[&[0.5, 0.25]])).unwrap();
        assert_eq!(c.data(), &[0.0]);
        let c = euclidean_distance_matrix(&rows(&[&[0.0, 0.0]]), &rows(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(c.data(), &[5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_sample(5, 3, &mut rng), random_sample(7, 3, &mut rng));
        assert_eq!(euclidean_distance_matrix(&a, &b).unwrap().transpose(), euclidean_distance_matrix(&b, &a).unwrap());
        assert!(euclidean_distance_matrix(&a, &random_sample(2, 4, &mut rng)).is_err());
    }

    #[test]
    fn remd_examples() {
        let m = |r: &[&[f64]]| DistanceMatrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>(), Metric::Cosine).unwrap();
        assert_eq!(remd(&m(&[&[0.3]])).unwrap(), 0.3);
        assert_eq!(remd(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap(), 0.0);
        close(remd(&m(&[&[0.2, 0.5], &[0.4, 0.1]])).unwrap(), 0.15, 1e-15);
    }

    #[test]
    fn remd_takes_the_larger_side() {
        // rows: min 0.1, 0.1 -> 0.1 ; cols: 0.1, 0.9, 0.1 -> 1.1/3
        let c = DistanceMatrix::from_rows(&[vec![0.1, 0.9, 1.0], vec![0.1, 1.0, 0.1]], Metric::Cosine).unwrap();
        close(remd(&c).unwrap(), 1.1 / 3.0, 1e-15);
    }

    #[test]
    fn remd_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, m) = (6, 9);
        let data: Vec<f64> = (0..n * m).map(|_| rng.random()).collect();
        let c = DistanceMatrix::new(n, m, data.clone(), Metric::Cosine).unwrap();
        let pr: Vec<usize> = rand::seq::index::sample(&mut rng, n, n).into_vec();
        let pc: Vec<usize> = rand::seq::index::sample(&mut rng, m, m).into_vec();
        let permuted: Vec<f64> = (0..n).flat_map(|i| pc.iter().map(|&j| data[pr[i] * m + j]).collect::<Vec<_>>()).collect();
        let p = DistanceMatrix::new(n, m, permuted, Metric::Cosine).unwrap();
        close(remd(&c).unwrap(), remd(&p).unwrap(), 1e-15);
    }

    #[test]
    fn all_forbidden_row_is_an_error() {
        let c = DistanceMatrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]], Metric::Cosine)
            .unwrap()
            .with_forbidden(vec![true, true, false, false])
            .unwrap();
        assert!(matches!(remd(&c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn moment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sample(10, 4, &mut rng);
        assert_eq!(moment_loss(&a, &a).unwrap(), 0.0);
        let b = random_sample(13, 4, &mut rng);
        close(moment_loss(&a, &b).unwrap(), moment_loss(&b, &a).unwrap(), 1e-15);

        // mu_a = (1,0), mu_b = (0,0), identical spread
        let a = rows(&[&[2.0, 1.0], &[0.0, -1.0]]);
        let b = rows(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        close(moment_loss(&a, &b).unwrap(), 0.5, 1e-15);
    }

    #[test]
    fn moment_loss_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_sample(12, 3, &mut rng);
        let b = random_sample(9, 3, &mut rng);
        let direct = |x: &FeatureSample, y: &FeatureSample| {
            let (sx, sy) = (moment_stats(x), moment_stats(y));
            let d = 3.0;
            sx.mean.iter().zip(&sy.mean).map(|(p, q)| (p - q).abs()).sum::<f64>() / d
                + sx.cov.iter().zip(&sy.cov).map(|(p, q)| (p - q).abs()).sum::<f64>() / (d * d)
        };
        close(moment_loss(&a, &b).unwrap(), direct(&a, &b), 1e-12);
        let scaled = FeatureSample::new(a.coords().to_vec(), Tensor::new(vec![12, 3], a.vectors().data().iter().map(|v| 2.0 * v).collect()).unwrap()).unwrap();
        close(moment_loss(&scaled, &b).unwrap(), direct(&scaled, &b), 1e-12);
        let sa = moment_stats(&a);
        let ss = moment_stats(&scaled);
        for (p, q) in sa.cov.iter().zip(&ss.cov) {
            close(*q, 4.0 * p, 1e-12);
        }
    }

    #[test]
    fn palette_examples() {
        let px = [[0.1, 0.5, 0.9], [0.3, 0.3, 0.2], [1.0, 0.0, 0.5]];
        assert_eq!(palette_loss(&px, &px).unwrap(), 0.0);
        close(palette_loss(&[[0.0; 3]], &[[1.0; 3]]).unwrap(), 3f64.sqrt(), 1e-12);
        let mut rev = px;
        rev.reverse();
        let out = [[0.2, 0.2, 0.2], [0.9, 0.1, 0.4]];
        close(palette_loss(&out, &px).unwrap(), palette_loss(&out, &rev).unwrap(), 1e-15);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_sample(8, 5, &mut rng).vectors().clone();
        let a0 = random_sample(8, 5, &mut rng).vectors().clone();
        let f = objective(|tape, a| {
            let c = cosine_costs(a, tape.constant(b.clone()), true)?;
            remd_var(c, &CostMask::default())?.loss.add(moment_loss_var(a, tape.constant(b.clone()))?)
        });
        let err = finite_diff_check(f, &a0, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");

        let s = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random()).collect()).unwrap();
        let o = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random()).collect()).unwrap();
        let g = objective(|tape, o| palette_loss_var(o, tape.constant(s.clone())));
        assert!(finite_diff_check(g, &o, 1e-6).unwrap() < 1e-4);
    }
}
