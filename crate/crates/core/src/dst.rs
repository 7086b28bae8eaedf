//! Deformable style transfer: keypoint cleaning and alignment, thin-plate
//! spline warps that are differentiable in the keypoint displacements, and
//! the joint optimization of the output image and the warp.
//!
//! Point coordinates are `[x, y]` in pixels with pixel centers at integers.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::features::FilterBank;
use crate::gram::GramTargets;
use crate::image::ImageBuffer;
use crate::optim::{Adam, Optimizer, RmsProp};
use crate::progress::{wants_preview, Observer, Progress};
use crate::pyramid::{collapse_vars, max_levels, LaplacianPyramid};
use crate::strotss::{collapse_params, scale_init, ScaleProblem, Selections, StrotssConfig};

pub const DEFAULT_MAX_PAIRS: usize = 80;
pub const DEFAULT_MIN_DIST: f64 = 10.0;

/// One keypoint pair. `target` is in the style frame inside a
/// [`CorrespondenceDocument`] and in the content frame inside a cleaned
/// [`CorrespondenceSet`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correspondence {
    pub source: [f64; 2],
    pub target: [f64; 2],
    #[serde(default = "unit_activation")]
    pub activation: f64,
}

fn unit_activation() -> f64 {
    1.0
}

/// Source points `P` in the content frame paired with target points `P'`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Result<Self> {
        for (k, p) in pairs.iter().enumerate() {
            let finite = p.source.iter().chain(&p.target).all(|v| v.is_finite());
            if !finite || !(p.activation >= 0.0 && p.activation.is_finite()) {
                return Err(invalid(format!("pair {k} has non-finite coordinates or a negative activation")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<[f64; 2]> {
        self.pairs.iter().map(|p| p.source).collect()
    }

    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.pairs.iter().map(|p| p.target).collect()
    }

    /// Displacements that carry every source exactly onto its target.
    pub fn ideal_theta(&self) -> WarpParams {
        WarpParams::new(self.pairs.iter().map(|p| [p.target[0] - p.source[0], p.target[1] - p.source[1]]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub max_pairs: usize,
    pub min_dist: f64,
    /// Pairs below this activation are dropped after the greedy pass.
    pub min_activation: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { max_pairs: DEFAULT_MAX_PAIRS, min_dist: DEFAULT_MIN_DIST, min_activation: 0.0 }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy selection by descending activation: a pair is kept when its
/// source is at least `min_dist` from every kept source, up to `max_pairs`.
pub fn clean_keypoints(raw: &CorrespondenceSet, cfg: &CleanConfig) -> Result<CorrespondenceSet> {
    if raw.is_empty() {
        return Err(invalid("no correspondences to clean"));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw.pairs[b].activation.total_cmp(&raw.pairs[a].activation));
    let mut kept: Vec<Correspondence> = Vec::new();
    for i in order {
        if kept.len() == cfg.max_pairs {
            break;
        }
        let p = raw.pairs[i];
        if kept.iter().all(|k| dist(k.source, p.source) >= cfg.min_dist) {
            kept.push(p);
        }
    }
    kept.retain(|p| p.activation >= cfg.min_activation);
    if kept.is_empty() {
        return Err(Error::Degenerate("every correspondence was filtered out".into()));
    }
    CorrespondenceSet::new(kept)
}

/// `q -> scale * rotation * q + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    /// Row-major 2x2 rotation.
    pub rotation: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    pub fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * q[0] + r[0][1] * q[1]) + self.translation[0],
            self.scale * (r[1][0] * q[0] + r[1][1] * q[1]) + self.translation[1],
        ]
    }
}

fn centroid(pts: &[[f64; 2]]) -> Vector2<f64> {
    let n = pts.len() as f64;
    pts.iter().fold(Vector2::zeros(), |acc, p| acc + Vector2::new(p[0], p[1])) / n
}

fn spread(pts: &[[f64; 2]], mu: &Vector2<f64>) -> f64 {
    pts.iter().map(|p| (Vector2::new(p[0], p[1]) - mu).norm_squared()).sum::<f64>() / pts.len() as f64
}

/// Least-squares similarity transform carrying `src` onto `dst`
/// (minimizes `sum |dst_i - T(src_i)|^2`), without reflections.
pub fn align_umeyama(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(shape_err(format!("{} source points vs {} destination points", src.len(), dst.len())));
    }
    if src.len() < 2 {
        return Err(Error::Degenerate("alignment needs at least two points".into()));
    }
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let var_s = spread(src, &mu_s);
    let extent = src.iter().chain(dst).flat_map(|p| p.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
    let tiny = (1e-12 * extent).powi(2);
    if var_s <= tiny || spread(dst, &mu_d) <= tiny {
        return Err(Error::Degenerate("point cloud is a single point".into()));
    }
    let mut cov = Matrix2::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (Vector2::new(d[0], d[1]) - mu_d) * (Vector2::new(s[0], s[1]) - mu_s).transpose();
    }
    cov /= src.len() as f64;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sign = Matrix2::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        sign[(1, 1)] = -1.0;
    }
    let r = u * sign * vt;
    let scale = (Matrix2::from_diagonal(&svd.singular_values) * sign).trace() / var_s;
    let t = mu_d - scale * r * mu_s;
    Ok(Similarity {
        scale,
        rotation: [[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]],
        translation: [t[0], t[1]],
    })
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Whether segments `ab` and `cd` cross at a point interior to both.
pub fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// Repeatedly drops the lowest-activation pair involved in a crossing
/// until no two source-to-target segments cross.
pub fn remove_crossings(c: &CorrespondenceSet) -> CorrespondenceSet {
    let mut pairs = c.pairs.clone();
    loop {
        let mut worst: Option<usize> = None;
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                let (p, q) = (&pairs[i], &pairs[j]);
                if !segments_cross(p.source, p.target, q.source, q.target) {
                    continue;
                }
                let loser = if q.activation <= p.activation { j } else { i };
                worst = match worst {
                    Some(w) if pairs[w].activation < pairs[loser].activation => Some(w),
                    Some(w) if pairs[w].activation == pairs[loser].activation => Some(w.max(loser)),
                    _ => Some(loser),
                };
            }
        }
        match worst {
            Some(k) => {
                pairs.remove(k);
            }
            None => return CorrespondenceSet { pairs },
        }
    }
}

/// Correspondence file as written by the UI. Targets are in the style
/// image's pixel frame.
///
/// ```json
/// {"pairs": [{"source": [40, 52], "target": [61, 50], "activation": 3.2}], "clean": true}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceDocument {
    pub pairs: Vec<Correspondence>,
    /// Run the greedy selection and crossing removal; alignment always runs.
    #[serde(default = "yes")]
    pub clean: bool,
}

fn yes() -> bool {
    true
}

fn doc_err(message: String) -> Error {
    Error::Document { kind: "correspondence", message }
}

impl CorrespondenceDocument {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| doc_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Checks every pair against the image dimensions `(height, width)`.
    pub fn validate(&self, content_dims: (usize, usize), style_dims: (usize, usize)) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(doc_err("pairs: no correspondences".into()));
        }
        for (k, p) in self.pairs.iter().enumerate() {
            for (field, xy, (h, w)) in [("source", p.source, content_dims), ("target", p.target, style_dims)] {
                let inside = xy[0] >= 0.0 && xy[1] >= 0.0 && xy[0] <= (w - 1) as f64 && xy[1] <= (h - 1) as f64;
                if !inside {
                    return Err(doc_err(format!(
                        "pairs[{k}].{field}: ({}, {}) is outside the {w}x{h} image",
                        xy[0], xy[1]
                    )));
                }
            }
            if !(p.activation >= 0.0 && p.activation.is_finite()) {
                return Err(doc_err(format!("pairs[{k}].activation: must be nonnegative, got {}", p.activation)));
            }
        }
        Ok(())
    }

    /// Cleans (if requested), maps the style keypoints into the content
    /// frame by a similarity fit, and removes crossings (if cleaning).
    pub fn prepare(&self, cfg: &CleanConfig) -> Result<CorrespondenceSet> {
        let mut set = CorrespondenceSet::new(self.pairs.clone())?;
        if self.clean {
            set = clean_keypoints(&set, cfg)?;
        }
        let t = align_umeyama(&set.targets(), &set.sources())?;
        set.pairs.iter_mut().for_each(|p| p.target = t.apply(p.target));
        if self.clean {
            set = remove_crossings(&set);
        }
        Ok(set)
    }
}

/// Radial basis of the spline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TpsKernel {
    /// `r^2 log r`.
    #[default]
    Biharmonic,
    /// `r^2`; only usable with a positive Tikhonov weight, since its Gram
    /// matrix is affine and cannot interpolate more than three points.
    Quadratic,
}

impl TpsKernel {
    /// Kernel value as a function of `r^2`.
    fn value(self, r2: f64) -> f64 {
        match self {
            TpsKernel::Biharmonic if r2 == 0.0 => 0.0,
            TpsKernel::Biharmonic => 0.5 * r2 * r2.ln(),
            TpsKernel::Quadratic => r2,
        }
    }

    /// `U'(r) / r` as a function of `r^2`.
    fn slope(self, r2: f64) -> f64 {
        match self {
            TpsKernel::Biharmonic if r2 == 0.0 => 0.0,
            TpsKernel::Biharmonic => r2.ln() + 1.0,
            TpsKernel::Quadratic => 2.0,
        }
    }
}

/// Affine normalization `q -> (q - origin) / unit` used for the solve.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Frame {
    origin: [f64; 2],
    unit: f64,
}

impl Frame {
    fn of_points(pts: &[[f64; 2]]) -> Self {
        let mu = centroid(pts);
        let unit = pts.iter().map(|p| (p[0] - mu[0]).abs().max((p[1] - mu[1]).abs())).fold(0.0, f64::max);
        Self { origin: [mu[0], mu[1]], unit: if unit > 0.0 { unit } else { 1.0 } }
    }

    fn of_raster(h: usize, w: usize) -> Self {
        Self { origin: [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0], unit: h.max(w) as f64 }
    }

    fn to_unit(&self, q: [f64; 2]) -> [f64; 2] {
        [(q[0] - self.origin[0]) / self.unit, (q[1] - self.origin[1]) / self.unit]
    }
}

/// Spline fitted in normalized coordinates. Coefficient rows are the `k`
/// kernel weights followed by the constant, x and y terms.
struct Spline {
    kernel: TpsKernel,
    centers: Vec<[f64; 2]>,
    coef: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Spline {
    fn fit(kernel: TpsKernel, reg: f64, centers: &[[f64; 2]], values: &[[f64; 2]]) -> Result<Self> {
        let k = centers.len();
        if values.len() != k {
            return Err(shape_err(format!("{k} spline centers vs {} values", values.len())));
        }
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(invalid(format!("spline regularization must be nonnegative, got {reg}")));
        }
        if kernel == TpsKernel::Quadratic && reg == 0.0 {
            return Err(invalid("the quadratic kernel needs a positive Tikhonov weight"));
        }
        if k < 3 {
            return Err(Error::Degenerate(format!("a thin-plate spline needs at least 3 points, got {k}")));
        }
        for i in 0..k {
            for j in i + 1..k {
                if dist(centers[i], centers[j]) <= 1e-9 {
                    return Err(Error::Degenerate(format!("spline points {i} and {j} coincide")));
                }
            }
        }
        let mu = centroid(centers);
        let mut cov = Matrix2::zeros();
        for c in centers {
            let d = Vector2::new(c[0], c[1]) - mu;
            cov += d * d.transpose();
        }
        if cov.determinant() <= 1e-12 * cov.trace().powi(2) {
            return Err(Error::Degenerate("spline points are collinear".into()));
        }
        let n = k + 3;
        let mut m = DMatrix::zeros(n, n);
        let mut rhs = DMatrix::zeros(n, 2);
        for i in 0..k {
            for j in 0..k {
                let (dx, dy) = (centers[i][0] - centers[j][0], centers[i][1] - centers[j][1]);
                m[(i, j)] = kernel.value(dx * dx + dy * dy);
            }
            m[(i, i)] += reg;
            let row = [1.0, centers[i][0], centers[i][1]];
            for (a, v) in row.into_iter().enumerate() {
                m[(i, k + a)] = v;
                m[(k + a, i)] = v;
            }
            rhs[(i, 0)] = values[i][0];
            rhs[(i, 1)] = values[i][1];
        }
        let lu = m.lu();
        let coef = lu.solve(&rhs).ok_or_else(|| Error::Degenerate("singular spline system".into()))?;
        if coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("singular spline system".into()));
        }
        Ok(Self { kernel, centers: centers.to_vec(), coef, lu })
    }

    fn eval(&self, q: [f64; 2]) -> [f64; 2] {
        let k = self.centers.len();
        let c = &self.coef;
        let mut out = [c[(k, 0)] + c[(k + 1, 0)] * q[0] + c[(k + 2, 0)] * q[1], c[(k, 1)] + c[(k + 1, 1)] * q[0] + c[(k + 2, 1)] * q[1]];
        for (i, p) in self.centers.iter().enumerate() {
            let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
            let u = self.kernel.value(dx * dx + dy * dy);
            out[0] += c[(i, 0)] * u;
            out[1] += c[(i, 1)] * u;
        }
        out
    }
}

/// Solved spline `f(q) = sum_i w_i U(|q - c_i| / unit) + v q + b`.
///
/// The kernel is evaluated on distances divided by `unit`, a length fixed
/// at solve time; the side conditions `sum w_i = 0` and
/// `sum w_i c_i = 0` make the affine part independent of that choice.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsSolution {
    pub kernel: TpsKernel,
    pub centers: Vec<[f64; 2]>,
    /// Kernel weights, `k x 2`.
    pub w: Vec<[f64; 2]>,
    /// Row-major affine matrix: output `d` is `v[d][0] x + v[d][1] y + b[d]`.
    pub v: [[f64; 2]; 2],
    pub b: [f64; 2],
    frame: Frame,
}

impl TpsSolution {
    pub fn eval(&self, q: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.v[0][0] * q[0] + self.v[0][1] * q[1] + self.b[0],
            self.v[1][0] * q[0] + self.v[1][1] * q[1] + self.b[1],
        ];
        let u2 = self.frame.unit * self.frame.unit;
        for (c, w) in self.centers.iter().zip(&self.w) {
            let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
            let u = self.kernel.value((dx * dx + dy * dy) / u2);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Largest violation of the side conditions, with centers measured in
    /// the solve frame.
    pub fn side_condition_error(&self) -> f64 {
        let mut acc = [0.0f64; 6];
        for (c, w) in self.centers.iter().zip(&self.w) {
            let cn = self.frame.to_unit(*c);
            for d in 0..2 {
                acc[d] += w[d];
                acc[2 + d] += w[d] * cn[0];
                acc[4 + d] += w[d] * cn[1];
            }
        }
        acc.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_weight(&self) -> f64 {
        self.w.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Interpolating spline with `f(src_i) = dst_i` (biharmonic kernel).
pub fn solve_tps(src: &[[f64; 2]], dst: &[[f64; 2]], reg: f64) -> Result<TpsSolution> {
    solve_tps_with(src, dst, TpsKernel::Biharmonic, reg)
}

/// [`solve_tps`] with an explicit kernel; `reg` is a Tikhonov weight on the
/// kernel block.
pub fn solve_tps_with(src: &[[f64; 2]], dst: &[[f64; 2]], kernel: TpsKernel, reg: f64) -> Result<TpsSolution> {
    let frame = Frame::of_points(src);
    let centers: Vec<[f64; 2]> = src.iter().map(|p| frame.to_unit(*p)).collect();
    let values: Vec<[f64; 2]> = dst.iter().map(|p| frame.to_unit(*p)).collect();
    let s = Spline::fit(kernel, reg, &centers, &values)?;
    let k = src.len();
    let (o, unit) = (frame.origin, frame.unit);
    let c = &s.coef;
    let mut v = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for d in 0..2 {
        v[d] = [c[(k + 1, d)], c[(k + 2, d)]];
        b[d] = unit * c[(k, d)] + o[d] - v[d][0] * o[0] - v[d][1] * o[1];
    }
    let w = (0..k).map(|i| [unit * c[(i, 0)], unit * c[(i, 1)]]).collect();
    Ok(TpsSolution { kernel, centers: src.to_vec(), w, v, b, frame })
}

/// Dense `[2, H, W]` displacement grid: planes of `dx` then `dy`. Pixel
/// `q` of a warped image reads the unwarped image at `q + flow(q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 2 * height * width {
            return Err(shape_err(format!("{height}x{width} flow with {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("flow field is not finite".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(shape_err(format!("flow tensor must be [2, H, W], got {:?}", t.shape()))),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `[dx, dy]` at row `y`, column `x`.
    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        let p = y * self.width + x;
        [self.data[p], self.data[self.height * self.width + p]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![2, self.height, self.width], self.data.clone()).expect("shape checked")
    }
}

/// Evaluates `sol(q) - q` at every pixel.
pub fn render_flow_field(sol: &TpsSolution, h: usize, w: usize) -> Result<FlowField> {
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let f = sol.eval([x as f64, y as f64]);
            data[y * w + x] = f[0] - x as f64;
            data[h * w + y * w + x] = f[1] - y as f64;
        }
    }
    FlowField::new(h, w, data)
}

/// Bilinear inverse warp with border clamping.
pub fn warp_image(img: &ImageBuffer, flow: &FlowField) -> Result<ImageBuffer> {
    if (img.height(), img.width()) != flow.dims() {
        return Err(shape_err(format!(
            "flow is {}x{}, image is {}x{}",
            flow.height,
            flow.width,
            img.height(),
            img.width()
        )));
    }
    let tape = Tape::new();
    let out = tape.constant(img.to_chw()).grid_sample(tape.constant(flow.to_tensor()))?;
    ImageBuffer::from_chw(&out.value(), img.colorspace())
}

/// Keypoint displacements `theta`, `k x 2`, in content pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpParams {
    theta: Vec<[f64; 2]>,
}

impl WarpParams {
    pub fn new(theta: Vec<[f64; 2]>) -> Self {
        Self { theta }
    }

    pub fn zeros(k: usize) -> Self {
        Self { theta: vec![[0.0; 2]; k] }
    }

    pub fn theta(&self) -> &[[f64; 2]] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.theta.len(), 2], self.theta.iter().flatten().copied().collect()).expect("k x 2")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [_, 2] => Ok(Self { theta: t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect() }),
            _ => Err(shape_err(format!("theta must be [k, 2], got {:?}", t.shape()))),
        }
    }
}

struct DeformationOp {
    /// `p'_i - p_i`.
    deltas: Vec<[f64; 2]>,
}

impl DeformationOp {
    fn residual(&self, theta: &[f64], i: usize) -> [f64; 2] {
        [self.deltas[i][0] - theta[2 * i], self.deltas[i][1] - theta[2 * i + 1]]
    }
}

impl CustomOp for DeformationOp {
    fn name(&self) -> &'static str {
        "deformation_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let theta = inputs[0].data();
        let k = self.deltas.len() as f64;
        let mut d = vec![0.0; theta.len()];
        for i in 0..self.deltas.len() {
            let r = self.residual(theta, i);
            let n = r[0].hypot(r[1]);
            // The norm's subgradient at zero is taken as zero.
            if n > 0.0 {
                d[2 * i] = -grad[0] * r[0] / (n * k);
                d[2 * i + 1] = -grad[0] * r[1] / (n * k);
            }
        }
        vec![Some(d)]
    }
}

/// `(1/k) sum |p'_i - (p_i + theta_i)|` for `theta: [k, 2]`.
pub fn deformation_loss_var<'t>(c: &CorrespondenceSet, theta: Var<'t>) -> Result<Var<'t>> {
    if theta.shape() != [c.len(), 2] || c.is_empty() {
        return Err(shape_err(format!("theta {:?} for {} correspondences", theta.shape(), c.len())));
    }
    let op = DeformationOp { deltas: c.ideal_theta().theta };
    let t = theta.value();
    let total: f64 = (0..c.len()).map(|i| {
        let r = op.residual(t.data(), i);
        r[0].hypot(r[1])
    }).sum();
    let out = Tensor::scalar(total / c.len() as f64);
    Ok(theta.tape().custom(&[theta], out, Box::new(op)))
}

pub fn deformation_loss(c: &CorrespondenceSet, theta: &WarpParams) -> Result<f64> {
    let tape = Tape::new();
    Ok(deformation_loss_var(c, tape.constant(theta.to_tensor()))?.item())
}

/// Anisotropic total variation of a `[2, H, W]` field divided by `W * H`.
pub fn tv_regularizer_var(flow: Var<'_>) -> Result<Var<'_>> {
    let s = flow.shape();
    let (h, w) = match *s {
        [2, h, w] => (h, w),
        _ => return Err(shape_err(format!("flow must be [2, H, W], got {s:?}"))),
    };
    let tape = flow.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    if w > 1 {
        total = total.add(flow.narrow(2, 1, w - 1)?.sub(flow.narrow(2, 0, w - 1)?)?.abs().sum())?;
    }
    if h > 1 {
        total = total.add(flow.narrow(1, 1, h - 1)?.sub(flow.narrow(1, 0, h - 1)?)?.abs().sum())?;
    }
    Ok(total.scale(1.0 / (h * w) as f64))
}

pub fn tv_regularizer(flow: &FlowField) -> Result<f64> {
    let tape = Tape::new();
    Ok(tv_regularizer_var(tape.constant(flow.to_tensor()))?.item())
}

/// Everything that maps keypoint displacements to a flow field on one
/// raster: the source points in the full-resolution content frame, the
/// raster size, and the spline settings.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGeometry {
    pub sources: Vec<[f64; 2]>,
    /// `(height, width)` of the frame the sources and displacements refer to.
    pub full_dims: (usize, usize),
    /// `(height, width)` of the raster the flow is rendered on.
    pub dims: (usize, usize),
    pub kernel: TpsKernel,
    pub reg: f64,
}

impl WarpGeometry {
    fn axis_scale(&self) -> [f64; 2] {
        [self.dims.1 as f64 / self.full_dims.1 as f64, self.dims.0 as f64 / self.full_dims.0 as f64]
    }

    /// Full-resolution point to raster coordinates (half-pixel aligned).
    fn to_raster(&self, q: [f64; 2]) -> [f64; 2] {
        let s = self.axis_scale();
        [(q[0] + 0.5) * s[0] - 0.5, (q[1] + 0.5) * s[1] - 0.5]
    }

    /// Spline taking the displaced keypoints back to their sources, fitted
    /// in the raster's normalized frame.
    fn spline(&self, theta: &[f64]) -> Result<Spline> {
        let frame = Frame::of_raster(self.dims.0, self.dims.1);
        let (centers, values): (Vec<_>, Vec<_>) = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let moved = [p[0] + theta[2 * i], p[1] + theta[2 * i + 1]];
                (frame.to_unit(self.to_raster(moved)), frame.to_unit(self.to_raster(*p)))
            })
            .unzip();
        Spline::fit(self.kernel, self.reg, &centers, &values)
    }

    fn check(&self, theta: &Tensor) -> Result<()> {
        if theta.shape() != [self.sources.len(), 2] {
            return Err(shape_err(format!("theta {:?} for {} keypoints", theta.shape(), self.sources.len())));
        }
        if self.dims.0 == 0 || self.dims.1 == 0 || self.full_dims.0 == 0 || self.full_dims.1 == 0 {
            return Err(shape_err("empty warp raster"));
        }
        Ok(())
    }

    /// Flow field for the given displacements.
    pub fn render(&self, theta: &WarpParams) -> Result<FlowField> {
        let tape = Tape::new();
        FlowField::from_tensor(&render_flow_var(tape.constant(theta.to_tensor()), self)?.value())
    }
}

struct FlowOp {
    geometry: WarpGeometry,
    spline: Spline,
}

fn pixel_unit(frame: &Frame, x: usize, y: usize) -> [f64; 2] {
    frame.to_unit([x as f64, y as f64])
}

impl CustomOp for FlowOp {
    fn name(&self) -> &'static str {
        "tps_flow"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = &self.geometry;
        let (h, w) = g.dims;
        let frame = Frame::of_raster(h, w);
        let sp = &self.spline;
        let k = sp.centers.len();
        let n = k + 3;
        let x = &sp.coef;
        // Gradient with respect to the coefficients, and the direct
        // dependence of the kernel columns on the centers.
        let mut hmat = DMatrix::zeros(n, 2);
        let mut dc = vec![[0.0f64; 2]; k];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let gq = [frame.unit * grad[p], frame.unit * grad[h * w + p]];
                if gq == [0.0, 0.0] {
                    continue;
                }
                let q = pixel_unit(&frame, px, py);
                for (i, c) in sp.centers.iter().enumerate() {
                    let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
                    let r2 = dx * dx + dy * dy;
                    let u = sp.kernel.value(r2);
                    hmat[(i, 0)] += u * gq[0];
                    hmat[(i, 1)] += u * gq[1];
                    let s = sp.kernel.slope(r2) * (gq[0] * x[(i, 0)] + gq[1] * x[(i, 1)]);
                    dc[i][0] -= s * dx;
                    dc[i][1] -= s * dy;
                }
                for (a, v) in [1.0, q[0], q[1]].into_iter().enumerate() {
                    hmat[(k + a, 0)] += v * gq[0];
                    hmat[(k + a, 1)] += v * gq[1];
                }
            }
        }
        // Through the solve: dL/dM = -Z X^T with Z = M^-1 H (M symmetric).
        let z = sp.lu.solve(&hmat).unwrap_or_else(|| DMatrix::zeros(n, 2));
        let dot = |a: usize, b: usize| z[(a, 0)] * x[(b, 0)] + z[(a, 1)] * x[(b, 1)];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let (dx, dy) = (sp.centers[i][0] - sp.centers[j][0], sp.centers[i][1] - sp.centers[j][1]);
                let s = (dot(i, j) + dot(j, i)) * sp.kernel.slope(dx * dx + dy * dy);
                dc[i][0] -= s * dx;
                dc[i][1] -= s * dy;
            }
            dc[i][0] -= dot(i, k + 1) + dot(k + 1, i);
            dc[i][1] -= dot(i, k + 2) + dot(k + 2, i);
        }
        let s = g.axis_scale();
        let d = dc.iter().flat_map(|c| [c[0] * s[0] / frame.unit, c[1] * s[1] / frame.unit]).collect();
        vec![Some(d)]
    }
}

/// Flow field `[2, h, w]` of the spline that maps `p_i + theta_i` back to
/// `p_i`, differentiable in `theta: [k, 2]`.
pub fn render_flow_var<'t>(theta: Var<'t>, geometry: &WarpGeometry) -> Result<Var<'t>> {
    let t = theta.value();
    geometry.check(&t)?;
    let spline = geometry.spline(t.data())?;
    let (h, w) = geometry.dims;
    let frame = Frame::of_raster(h, w);
    let mut data = vec![0.0; 2 * h * w];
    // Zero displacements give the identity spline; skip the evaluation so
    // rounding cannot leave a residual flow.
    if t.data().iter().any(|&v| v != 0.0) {
        for y in 0..h {
            for x in 0..w {
                let f = spline.eval(pixel_unit(&frame, x, y));
                data[y * w + x] = frame.unit * f[0] + frame.origin[0] - x as f64;
                data[h * w + y * w + x] = frame.unit * f[1] + frame.origin[1] - y as f64;
            }
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("flow field is not finite".into()));
    }
    let out = Tensor::new(vec![2, h, w], data)?;
    Ok(theta.tape().custom(&[theta], out, Box::new(FlowOp { geometry: geometry.clone(), spline })))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DstBase {
    #[default]
    Strotss,
    Gram,
}

/// Deformation strength presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    #[default]
    #[serde(alias = "medium")]
    Med,
    High,
}

impl Regime {
    /// `(beta, gamma)` for the given base method.
    pub fn weights(self, base: DstBase) -> (f64, f64) {
        match (base, self) {
            (DstBase::Strotss, Regime::Low) => (0.3, 75.0),
            (DstBase::Strotss, Regime::Med) => (0.5, 50.0),
            (DstBase::Strotss, Regime::High) => (0.7, 10.0),
            (DstBase::Gram, Regime::Low) => (3.0, 750.0),
            (DstBase::Gram, Regime::Med) => (7.0, 100.0),
            (DstBase::Gram, Regime::High) => (15.0, 100.0),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Regime::Low),
            "med" | "medium" => Ok(Regime::Med),
            "high" => Ok(Regime::High),
            _ => Err(invalid(format!("unknown regime {s:?}; expected low, med or high"))),
        }
    }
}

/// Single-scale schedule for the Gram base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GramSchedule {
    pub long_side: usize,
    pub steps: usize,
    pub lr: f64,
    pub pyramid_levels: usize,
}

impl Default for GramSchedule {
    fn default() -> Self {
        Self { long_side: 256, steps: 400, lr: 0.005, pyramid_levels: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DstConfig {
    pub base: DstBase,
    pub regime: Regime,
    /// Explicit weights override the regime.
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    /// Content weight; defaults to the base method's own default.
    pub alpha: Option<f64>,
    /// Adam step for the displacements, in content pixels.
    pub theta_lr: f64,
    pub kernel: TpsKernel,
    /// Tikhonov weight on the spline's kernel block.
    pub tikhonov: f64,
    /// Schedule and bank for the STROTSS base; its bank and seed are also
    /// used by the Gram base.
    pub strotss: StrotssConfig,
    pub gram: GramSchedule,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            base: DstBase::Strotss,
            regime: Regime::Med,
            beta: None,
            gamma: None,
            alpha: None,
            theta_lr: 0.25,
            kernel: TpsKernel::Biharmonic,
            tikhonov: 0.0,
            strotss: StrotssConfig::default(),
            gram: GramSchedule::default(),
        }
    }
}

/// Content weight of the Gram base when none is given; balances the
/// size-normalized content term against the Gram terms of the built-in bank.
pub const DEFAULT_GRAM_ALPHA: f64 = 0.05;

impl DstConfig {
    /// `(alpha, beta, gamma)` after applying defaults and the regime.
    pub fn resolved_weights(&self) -> (f64, f64, f64) {
        let (rb, rg) = self.regime.weights(self.base);
        let alpha = self.alpha.unwrap_or(match self.base {
            DstBase::Strotss => self.strotss.alpha,
            DstBase::Gram => DEFAULT_GRAM_ALPHA,
        });
        (alpha, self.beta.unwrap_or(rb), self.gamma.unwrap_or(rg))
    }

    pub fn validate(&self) -> Result<()> {
        let (alpha, beta, gamma) = self.resolved_weights();
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.theta_lr > 0.0) {
            return Err(invalid("theta_lr must be positive"));
        }
        if self.kernel == TpsKernel::Quadratic && !(self.tikhonov > 0.0) {
            return Err(invalid("the quadratic kernel needs a positive tikhonov weight"));
        }
        if self.base == DstBase::Gram && (self.gram.long_side < 16 || self.gram.pyramid_levels == 0) {
            return Err(invalid("gram schedule needs a long side >= 16 and at least one pyramid level"));
        }
        let mut s = self.strotss.clone();
        s.alpha = if self.base == DstBase::Strotss { alpha.max(f64::MIN_POSITIVE) } else { s.alpha };
        s.validate()
    }
}

/// Objective terms of one evaluation, unweighted except for the base
/// method's own internal weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DstTerms {
    /// Weighted content term of the base method.
    pub content: f64,
    pub style: f64,
    pub style_warped: f64,
    pub warp: f64,
    pub tv: f64,
    pub total: f64,
}

enum BaseProblem<'b> {
    Strotss(ScaleProblem<'b>),
    Gram { bank: &'b FilterBank, targets: GramTargets, alpha: f64 },
}

/// The joint objective on one raster.
pub struct DstProblem<'b> {
    base: BaseProblem<'b>,
    geometry: WarpGeometry,
    correspondences: CorrespondenceSet,
    beta: f64,
    gamma: f64,
}

impl<'b> DstProblem<'b> {
    /// STROTSS base; `alpha` is the content weight at this scale.
    #[allow(clippy::too_many_arguments)]
    pub fn strotss(
        bank: &'b FilterBank,
        content: &ImageBuffer,
        style: &ImageBuffer,
        alpha: f64,
        correspondences: &CorrespondenceSet,
        full_dims: (usize, usize),
        beta: f64,
        gamma: f64,
    ) -> Result<Self> {
        let base = BaseProblem::Strotss(ScaleProblem::new(bank, content, style, alpha, None)?);
        Self::with_base(base, content, correspondences, full_dims, beta, gamma)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn gram(
        bank: &'b FilterBank,
        content: &ImageBuffer,
        style: &ImageBuffer,
        alpha: f64,
        correspondences: &CorrespondenceSet,
        full_dims: (usize, usize),
        beta: f64,
        gamma: f64,
    ) -> Result<Self> {
        content.expect_rgb()?;
        style.expect_rgb()?;
        let targets = GramTargets::new(bank, &content.to_chw(), &style.to_chw())?;
        Self::with_base(BaseProblem::Gram { bank, targets, alpha }, content, correspondences, full_dims, beta, gamma)
    }

    fn with_base(
        base: BaseProblem<'b>,
        content: &ImageBuffer,
        correspondences: &CorrespondenceSet,
        full_dims: (usize, usize),
        beta: f64,
        gamma: f64,
    ) -> Result<Self> {
        if correspondences.is_empty() {
            return Err(invalid("deformable transfer needs at least one correspondence"));
        }
        let geometry = WarpGeometry {
            sources: correspondences.sources(),
            full_dims,
            dims: (content.height(), content.width()),
            kernel: TpsKernel::Biharmonic,
            reg: 0.0,
        };
        Ok(Self { base, geometry, correspondences: correspondences.clone(), beta, gamma })
    }

    pub fn with_kernel(mut self, kernel: TpsKernel, reg: f64) -> Self {
        self.geometry.kernel = kernel;
        self.geometry.reg = reg;
        self
    }

    pub fn geometry(&self) -> &WarpGeometry {
        &self.geometry
    }

    pub fn correspondences(&self) -> &CorrespondenceSet {
        &self.correspondences
    }

    /// Draws the base method's feature coordinates for one step (empty for
    /// the Gram base, which uses every position).
    pub fn draw_coords(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        match &self.base {
            BaseProblem::Strotss(p) => p.draw_coords(n, rng),
            BaseProblem::Gram { .. } => Ok((Vec::new(), Vec::new())),
        }
    }

    fn base_parts<'t>(
        &self,
        img: Var<'t>,
        cc: &[(usize, usize)],
        sc: &[(usize, usize)],
        with_content: bool,
    ) -> Result<(Option<Var<'t>>, Var<'t>, Selections)> {
        match &self.base {
            BaseProblem::Strotss(p) => {
                let parts = p.loss_parts(img, cc, sc)?;
                Ok((with_content.then_some(parts.content), parts.style, parts.selections))
            }
            BaseProblem::Gram { bank, targets, alpha } => {
                let content = if with_content { Some(targets.content_loss(bank, img)?.scale(*alpha)) } else { None };
                Ok((content, targets.style_loss(bank, img)?, Selections::default()))
            }
        }
    }

    /// `content(O) + style(O) + style(W(O, theta)) + beta L_warp + gamma R_TV`
    /// for `img: [3, H, W]` and `theta: [k, 2]`.
    pub fn objective<'t>(
        &self,
        img: Var<'t>,
        theta: Var<'t>,
        cc: &[(usize, usize)],
        sc: &[(usize, usize)],
    ) -> Result<(Var<'t>, DstTerms, Selections)> {
        let flow = render_flow_var(theta, &self.geometry)?;
        let warped = img.grid_sample(flow)?;
        let (content, style, mut sel) = self.base_parts(img, cc, sc, true)?;
        let content = content.expect("requested");
        let (_, style_w, sel_w) = self.base_parts(warped, cc, sc, false)?;
        sel.absorb(sel_w);
        let warp = deformation_loss_var(&self.correspondences, theta)?;
        let tv = tv_regularizer_var(flow)?;
        let total = content.add(style)?.add(style_w)?.add(warp.scale(self.beta))?.add(tv.scale(self.gamma))?;
        let terms = DstTerms {
            content: content.item(),
            style: style.item(),
            style_warped: style_w.item(),
            warp: warp.item(),
            tv: tv.item(),
            total: total.item(),
        };
        Ok((total, terms, sel))
    }

    /// Objective of a plain image and displacement set on fixed coordinates.
    pub fn evaluate(
        &self,
        img: &ImageBuffer,
        theta: &WarpParams,
        cc: &[(usize, usize)],
        sc: &[(usize, usize)],
    ) -> Result<DstTerms> {
        let tape = Tape::new();
        let (_, t, _) = self.objective(tape.constant(img.to_chw()), tape.constant(theta.to_tensor()), cc, sc)?;
        Ok(t)
    }
}

/// Optimization record of one raster.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DstScaleReport {
    pub long_side: usize,
    /// Objective before each update.
    pub losses: Vec<f64>,
    pub last: DstTerms,
}

#[derive(Clone, Copy, Debug)]
pub struct DstSchedule {
    pub steps: usize,
    pub lr: f64,
    pub theta_lr: f64,
    pub samples: usize,
    pub pyramid_levels: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub scale: usize,
    pub scales: usize,
}

/// Jointly runs RMSprop on the Laplacian coefficients of `init` and Adam
/// on `theta`. Returns the unwarped image and the final displacements.
pub fn optimize_scale(
    problem: &DstProblem<'_>,
    init: &ImageBuffer,
    theta: &WarpParams,
    sched: &DstSchedule,
    rng: &mut ChaCha8Rng,
    observer: &dyn Observer,
) -> Result<(ImageBuffer, WarpParams, DstScaleReport)> {
    if (init.height(), init.width()) != problem.geometry.dims {
        return Err(invalid("initialization does not match the problem raster"));
    }
    let levels = sched.pyramid_levels.min(max_levels(init.height(), init.width()));
    let mut params: Vec<Tensor> =
        LaplacianPyramid::build(init, levels)?.levels().iter().map(ImageBuffer::to_chw).collect();
    let mut th = [theta.to_tensor()];
    let mut opt = RmsProp::new(sched.lr, sched.rms_decay, sched.rms_eps)?;
    let mut opt_theta = Adam::new(sched.theta_lr, 0.9, 0.999, 1e-8)?;
    let mut report = DstScaleReport { long_side: init.height().max(init.width()), ..Default::default() };
    for step in 1..=sched.steps {
        if observer.cancelled() {
            return Err(Error::Cancelled);
        }
        let (cc, sc) = problem.draw_coords(sched.samples, rng)?;
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let tv = tape.leaf(th[0].clone());
        let img = collapse_vars(&leaves)?;
        let (loss, terms, _) = problem.objective(img, tv, &cc, &sc)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        let gt = [grads.wrt(tv)];
        opt.step(&mut params, &g)?;
        opt_theta.step(&mut th, &gt)?;
        report.losses.push(terms.total);
        report.last = terms;
        let p = Progress { scale: sched.scale, scales: sched.scales, step, steps: sched.steps, loss: terms.total };
        observer.on_step(&p);
        if wants_preview(observer, step, sched.steps) {
            let theta = WarpParams::from_tensor(&th[0])?;
            let flow = problem.geometry.render(&theta)?;
            observer.on_preview(&p, &warp_image(&collapse_params(&params)?, &flow)?.clamp01());
        }
    }
    Ok((collapse_params(&params)?, WarpParams::from_tensor(&th[0])?, report))
}

#[derive(Clone, Debug)]
pub struct DstOutput {
    /// The warped result `W(O, theta)`, clamped.
    pub image: ImageBuffer,
    pub unwarped: ImageBuffer,
    pub theta: WarpParams,
    pub flow: FlowField,
    pub reports: Vec<DstScaleReport>,
}

/// Full run. Correspondences must already be cleaned and aligned, with
/// coordinates in the full-resolution content frame.
pub fn dst_stylize(
    content: &ImageBuffer,
    style: &ImageBuffer,
    correspondences: &CorrespondenceSet,
    config: &DstConfig,
    observer: &dyn Observer,
) -> Result<DstOutput> {
    config.validate()?;
    content.expect_rgb()?;
    style.expect_rgb()?;
    if correspondences.is_empty() {
        return Err(invalid("deformable transfer needs at least one correspondence"));
    }
    let full = (content.height(), content.width());
    let (alpha, beta, gamma) = config.resolved_weights();
    let bank = FilterBank::new(config.strotss.bank.clone())?;
    let sc = &config.strotss;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut theta = WarpParams::zeros(correspondences.len());
    let mut reports = Vec::new();
    let build = |c: &ImageBuffer, s: &ImageBuffer, a: f64| -> Result<DstProblem<'_>> {
        let p = match config.base {
            DstBase::Strotss => DstProblem::strotss(&bank, c, s, a, correspondences, full, beta, gamma)?,
            DstBase::Gram => DstProblem::gram(&bank, c, s, a, correspondences, full, beta, gamma)?,
        };
        Ok(p.with_kernel(config.kernel, config.tikhonov))
    };
    let mut out: Option<(ImageBuffer, DstProblem<'_>)> = None;
    match config.base {
        DstBase::Strotss => {
            let cfg = StrotssConfig { alpha, ..sc.clone() };
            for (scale, a) in cfg.alpha_schedule().into_iter().enumerate() {
                let long = cfg.long_side(scale);
                let c = content.resize_long_side(long)?;
                let s = style.resize_long_side(long)?;
                if c.height().min(c.width()) < 16 || s.height().min(s.width()) < 16 {
                    return Err(invalid(format!("inputs are too elongated for a {long}px scale")));
                }
                let init = scale_init(out.take().map(|(img, _)| img), &c, style)?;
                let problem = build(&c, &s, a)?;
                let sched = DstSchedule {
                    steps: cfg.steps,
                    lr: cfg.lr_for(scale),
                    theta_lr: config.theta_lr,
                    samples: cfg.samples,
                    pyramid_levels: cfg.pyramid_levels,
                    rms_decay: cfg.rms_decay,
                    rms_eps: cfg.rms_eps,
                    scale,
                    scales: cfg.scales,
                };
                let (img, t, report) = optimize_scale(&problem, &init, &theta, &sched, &mut rng, observer)?;
                theta = t;
                reports.push(report);
                out = Some((img, problem));
            }
        }
        DstBase::Gram => {
            let g = &config.gram;
            let c = content.resize_long_side(g.long_side)?;
            let s = style.resize_long_side(g.long_side)?;
            let problem = build(&c, &s, alpha)?;
            let sched = DstSchedule {
                steps: g.steps,
                lr: g.lr,
                theta_lr: config.theta_lr,
                samples: 0,
                pyramid_levels: g.pyramid_levels,
                rms_decay: sc.rms_decay,
                rms_eps: sc.rms_eps,
                scale: 0,
                scales: 1,
            };
            let (img, t, report) = optimize_scale(&problem, &c, &theta, &sched, &mut rng, observer)?;
            theta = t;
            reports.push(report);
            out = Some((img, problem));
        }
    }
    let (unwarped, problem) = out.expect("at least one scale");
    let flow = problem.geometry.render(&theta)?;
    let image = warp_image(&unwarped, &flow)?.clamp01();
    Ok(DstOutput { image, unwarped, theta, flow, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, objective};
    use crate::features::FilterBankSpec;
    use crate::image::ColorSpace;
    use crate::progress::Silent;
    use rand::Rng;

    fn pair(s: [f64; 2], t: [f64; 2], a: f64) -> Correspondence {
        Correspondence { source: s, target: t, activation: a }
    }

    fn set(pairs: Vec<Correspondence>) -> CorrespondenceSet {
        CorrespondenceSet::new(pairs).unwrap()
    }

    #[test]
    fn cleaning_respects_spacing_and_cap() {
        let raw = set(vec![pair([0.0, 0.0], [1.0, 1.0], 1.0), pair([3.0, 4.0], [1.0, 1.0], 2.0)]);
        let c = clean_keypoints(&raw, &CleanConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs()[0].activation, 2.0);

        let many: Vec<_> = (0..100).map(|i| pair([(i % 10) as f64 * 12.0, (i / 10) as f64 * 12.0], [0.0, 0.0], i as f64)).collect();
        assert_eq!(clean_keypoints(&set(many), &CleanConfig::default()).unwrap().len(), 80);

        let one = set(vec![pair([5.0, 5.0], [7.0, 8.0], 0.5)]);
        assert_eq!(clean_keypoints(&one, &CleanConfig::default()).unwrap(), one);

        let cfg = CleanConfig { min_activation: 10.0, ..Default::default() };
        assert!(clean_keypoints(&one, &cfg).is_err());
        assert!(clean_keypoints(&CorrespondenceSet::default(), &cfg).is_err());
    }

    #[test]
    fn umeyama_recovers_similarities() {
        let src: Vec<[f64; 2]> = vec![[0.0, 0.0], [10.0, 1.0], [3.0, 7.0], [-4.0, 5.0], [6.0, -2.0]];
        let t = align_umeyama(&src, &src).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12 && t.translation.iter().all(|v| v.abs() < 1e-12));

        let (s, a) = (1.5, 30f64.to_radians());
        let truth = Similarity {
            scale: s,
            rotation: [[a.cos(), -a.sin()], [a.sin(), a.cos()]],
            translation: [4.0, -2.0],
        };
        let dst: Vec<_> = src.iter().map(|p| truth.apply(*p)).collect();
        let t = align_umeyama(&src, &dst).unwrap();
        assert!((t.scale - s).abs() < 1e-6);
        for d in 0..2 {
            assert!((t.translation[d] - truth.translation[d]).abs() < 1e-6);
            for e in 0..2 {
                assert!((t.rotation[d][e] - truth.rotation[d][e]).abs() < 1e-6);
            }
        }

        let two = [[1.0, 2.0], [5.0, -1.0]];
        let dst2 = [[0.0, 0.0], [3.0, 9.0]];
        let t = align_umeyama(&two, &dst2).unwrap();
        for (p, q) in two.iter().zip(&dst2) {
            assert!(dist(t.apply(*p), *q) < 1e-9);
        }

        assert!(matches!(align_umeyama(&[[1.0, 1.0], [1.0, 1.0]], &dst2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn crossing_removal() {
        let parallel = set(vec![pair([0.0, 0.0], [10.0, 0.0], 1.0), pair([0.0, 5.0], [10.0, 5.0], 2.0)]);
        assert_eq!(remove_crossings(&parallel), parallel);

        let x = set(vec![pair([0.0, 0.0], [10.0, 10.0], 1.0), pair([0.0, 10.0], [10.0, 0.0], 2.0)]);
        let r = remove_crossings(&x);
        assert_eq!(r.len(), 1);
        assert_eq!(r.pairs()[0].activation, 2.0);

        let touch = set(vec![pair([0.0, 0.0], [5.0, 5.0], 1.0), pair([5.0, 5.0], [10.0, 0.0], 2.0)]);
        assert_eq!(remove_crossings(&touch).len(), 2);
    }

    #[test]
    fn document_prepare_maps_targets_into_content_frame() {
        let doc = CorrespondenceDocument::parse(
            r#"{"pairs":[{"source":[10,10],"target":[20,20]},{"source":[40,10],"target":[80,20]},
                        {"source":[10,40],"target":[20,80]}],"clean":false}"#,
        )
        .unwrap();
        assert_eq!(doc.pairs[0].activation, 1.0);
        let s = doc.prepare(&CleanConfig::default()).unwrap();
        for p in s.pairs() {
            assert!(dist(p.source, p.target) < 1e-9, "{p:?}");
        }
        let err = doc.validate((30, 30), (100, 100)).unwrap_err().to_string();
        assert!(err.contains("pairs[1].source"), "{err}");
        assert!(CorrespondenceDocument::parse(r#"{"pairs":[],"bogus":1}"#).is_err());
        assert_eq!(CorrespondenceDocument::parse(&doc.to_json()).unwrap(), doc);
    }

    #[test]
    fn tps_identity_translation_and_interpolation() {
        let src = [[3.0, 4.0], [20.0, 5.0], [8.0, 17.0], [15.0, 14.0]];
        let id = solve_tps(&src, &src, 0.0).unwrap();
        assert!(id.max_weight() < 1e-9);
        assert!((id.v[0][0] - 1.0).abs() < 1e-12 && id.v[0][1].abs() < 1e-12 && id.v[1][1] - 1.0 < 1e-12);
        assert!(id.b.iter().all(|b| b.abs() < 1e-9));

        let moved: Vec<_> = src.iter().map(|p| [p[0] + 5.0, p[1]]).collect();
        let t = solve_tps(&src, &moved, 0.0).unwrap();
        assert!(t.max_weight() < 1e-9);
        for q in [[0.0, 0.0], [31.0, 7.5], [-3.0, 40.0]] {
            let f = t.eval(q);
            assert!((f[0] - q[0] - 5.0).abs() < 1e-9 && (f[1] - q[1]).abs() < 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
        let dst: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + rng.random_range(-5.0..5.0), p[1] + rng.random_range(-5.0..5.0)]).collect();
        let t = solve_tps(&pts, &dst, 0.0).unwrap();
        for (p, d) in pts.iter().zip(&dst) {
            assert!(dist(t.eval(*p), *d) < 1e-6);
        }
        assert!(t.side_condition_error() < 1e-9);
    }

    #[test]
    fn tps_rejects_degenerate_input_and_literal_kernel_needs_regularization() {
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(matches!(solve_tps(&line, &line, 0.0), Err(Error::Degenerate(_))));
        let dup = [[0.0, 0.0], [0.0, 0.0], [2.0, 1.0], [3.0, 5.0]];
        assert!(matches!(solve_tps(&dup, &dup, 0.0), Err(Error::Degenerate(_))));
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 4.0]];
        assert!(solve_tps_with(&pts, &pts, TpsKernel::Quadratic, 0.0).is_err());
        let t = solve_tps_with(&pts, &pts, TpsKernel::Quadratic, 1e-3).unwrap();
        assert!(dist(t.eval([5.0, 4.0]), [5.0, 4.0]) < 1e-9);
    }

    #[test]
    fn flow_rendering_and_warping() {
        let src = [[3.0, 4.0], [20.0, 5.0], [8.0, 17.0], [15.0, 14.0]];
        let flow = render_flow_field(&solve_tps(&src, &src, 0.0).unwrap(), 24, 24).unwrap();
        assert!(flow.data().iter().all(|v| v.abs() < 1e-9));
        let shifted: Vec<_> = src.iter().map(|p| [p[0] + 3.0, p[1] - 1.0]).collect();
        let sol = solve_tps(&src, &shifted, 0.0).unwrap();
        let flow = render_flow_field(&sol, 24, 24).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let f = flow.at(y, x);
                assert!((f[0] - 3.0).abs() < 1e-9 && (f[1] + 1.0).abs() < 1e-9);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dst: Vec<_> = src.iter().map(|p| [p[0] + rng.random_range(-2.0..2.0), p[1] + rng.random_range(-2.0..2.0)]).collect();
        let flow = render_flow_field(&solve_tps(&src, &dst, 0.0).unwrap(), 24, 24).unwrap();
        for (p, d) in src.iter().zip(&dst) {
            let f = flow.at(p[1] as usize, p[0] as usize);
            assert!((p[0] + f[0] - d[0]).abs() < 1e-6 && (p[1] + f[1] - d[1]).abs() < 1e-6);
        }

        let ramp = ImageBuffer::from_fn(10, 12, 1, ColorSpace::Srgb, |y, x| vec![x as f64 * 0.5 - y as f64 * 0.25]).unwrap();
        let mut with_neg_zero = ramp.clone();
        with_neg_zero.data_mut()[0] = -0.0;
        let same = warp_image(&with_neg_zero, &FlowField::zeros(10, 12)).unwrap();
        assert!(same.data().iter().zip(with_neg_zero.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut d = vec![0.0; 240];
        d[..120].fill(3.0);
        let out = warp_image(&ramp, &FlowField::new(10, 12, d).unwrap()).unwrap();
        for y in 0..10 {
            for x in 0..9 {
                assert_eq!(out.pixel(y, x)[0], ramp.pixel(y, x + 3)[0]);
            }
        }
    }

    #[test]
    fn deformation_and_tv_values() {
        let c = set(vec![pair([0.0, 0.0], [3.0, 4.0], 1.0)]);
        assert_eq!(deformation_loss(&c, &WarpParams::zeros(1)).unwrap(), 5.0);
        assert_eq!(deformation_loss(&c, &c.ideal_theta()).unwrap(), 0.0);
        let c2 = set(vec![pair([0.0, 0.0], [6.0, 8.0], 1.0)]);
        assert_eq!(deformation_loss(&c2, &WarpParams::zeros(1)).unwrap(), 10.0);
        assert!(deformation_loss(&c, &WarpParams::zeros(2)).is_err());

        let f = FlowField::new(2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tv_regularizer(&f).unwrap(), 0.5);
        assert_eq!(tv_regularizer(&FlowField::new(3, 3, vec![2.5; 18]).unwrap()).unwrap(), 0.0);
        let g = FlowField::new(3, 3, (0..18).map(|i| (i * 7 % 5) as f64).collect()).unwrap();
        let g3 = FlowField::new(3, 3, g.data().iter().map(|v| -3.0 * v).collect()).unwrap();
        assert!((tv_regularizer(&g3).unwrap() - 3.0 * tv_regularizer(&g).unwrap()).abs() < 1e-12);
    }

    fn geometry(kernel: TpsKernel, reg: f64) -> WarpGeometry {
        WarpGeometry {
            sources: vec![[5.0, 6.0], [30.0, 8.0], [10.0, 27.0], [26.0, 25.0]],
            full_dims: (32, 32),
            dims: (16, 16),
            kernel,
            reg,
        }
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let theta = Tensor::new(vec![4, 2], vec![1.3, -0.7, -2.1, 0.4, 0.9, 1.8, -0.5, -1.2]).unwrap();
        let weights: Vec<f64> = (0..2 * 16 * 16).map(|i| ((i * 31 % 23) as f64 / 23.0) - 0.4).collect();
        for (kernel, reg) in [(TpsKernel::Biharmonic, 0.0), (TpsKernel::Quadratic, 1e-2), (TpsKernel::Biharmonic, 0.1)] {
            let g = geometry(kernel, reg);
            let wts = Tensor::new(vec![2, 16, 16], weights.clone()).unwrap();
            let f = objective(|tape, t| {
                let flow = render_flow_var(t, &g)?;
                flow.mul(tape.constant(wts.clone()))?.sum().square().scale(1e-3).add(flow.square().sum())
            });
            let err = finite_diff_check(f, &theta, 1e-5).unwrap();
            assert!(err < 1e-5, "{kernel:?} {reg}: {err}");
        }
    }

    #[test]
    fn geometry_renders_identity_for_zero_theta() {
        let g = geometry(TpsKernel::Biharmonic, 0.0);
        let flow = g.render(&WarpParams::zeros(4)).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    fn smooth(h: usize, w: usize, phase: f64) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, ColorSpace::Srgb, |y, x| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            vec![
                0.5 + 0.4 * (6.0 * u + phase).sin(),
                0.5 + 0.4 * (5.0 * v - phase).cos(),
                0.5 + 0.3 * (4.0 * (u + v) + 2.0 * phase).sin(),
            ]
        })
        .unwrap()
    }

    fn four_pairs() -> CorrespondenceSet {
        set(vec![
            pair([6.0, 6.0], [8.0, 5.0], 1.0),
            pair([25.0, 7.0], [23.0, 9.0], 1.0),
            pair([7.0, 24.0], [9.0, 22.0], 1.0),
            pair([24.0, 25.0], [21.0, 23.0], 1.0),
        ])
    }

    #[test]
    fn joint_objective_gradient_in_theta() {
        let bank = FilterBank::new(FilterBankSpec::default()).unwrap();
        let (c, s) = (smooth(32, 32, 0.0), smooth(32, 32, 1.7));
        let corr = four_pairs();
        let img = smooth(32, 32, 0.6).to_chw();
        let theta = Tensor::new(vec![4, 2], vec![0.7, -0.4, -1.1, 0.9, 1.3, -0.6, -0.8, -1.4]).unwrap();
        let gram = DstProblem::gram(&bank, &c, &s, 1.0, &corr, (32, 32), 3.0, 20.0).unwrap();
        let st = DstProblem::strotss(&bank, &c, &s, 4.0, &corr, (32, 32), 0.5, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cc, sc) = st.draw_coords(64, &mut rng).unwrap();
        for p in [&gram, &st] {
            let f = objective(|tape, t| Ok(p.objective(tape.constant(img.clone()), t, &cc, &sc)?.0));
            let err = finite_diff_check(f, &theta, 1e-6).unwrap();
            assert!(err < 1e-3, "{err}");
        }
    }

    #[test]
    fn ideal_theta_zeroes_the_warp_term_and_short_run_descends() {
        let bank = FilterBank::new(FilterBankSpec::default()).unwrap();
        let (c, s) = (smooth(32, 32, 0.0), smooth(32, 32, 1.7));
        let corr = four_pairs();
        let p = DstProblem::strotss(&bank, &c, &s, 4.0, &corr, (32, 32), 0.5, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cc, sc) = p.draw_coords(64, &mut rng).unwrap();
        assert_eq!(p.evaluate(&c, &corr.ideal_theta(), &cc, &sc).unwrap().warp, 0.0);

        let cfg = DstConfig {
            beta: Some(0.7),
            gamma: Some(1.0),
            strotss: StrotssConfig { scales: 1, coarsest_long_side: 32, steps: 10, ..Default::default() },
            ..Default::default()
        };
        let out = dst_stylize(&c, &s, &corr, &cfg, &Silent).unwrap();
        let l = &out.reports[0].losses;
        assert!(l.last() < l.first(), "{l:?}");
        assert_eq!((out.image.height(), out.image.width()), (32, 32));
        assert!(deformation_loss(&corr, &out.theta).unwrap() < deformation_loss(&corr, &WarpParams::zeros(4)).unwrap());
    }

    #[test]
    fn regimes_resolve_per_base() {
        let mut cfg = DstConfig { regime: "low".parse().unwrap(), ..Default::default() };
        assert_eq!(cfg.resolved_weights(), (16.0, 0.3, 75.0));
        cfg.base = DstBase::Gram;
        cfg.regime = Regime::High;
        assert_eq!(cfg.resolved_weights(), (DEFAULT_GRAM_ALPHA, 15.0, 100.0));
        cfg.beta = Some(1.0);
        assert_eq!(cfg.resolved_weights().1, 1.0);
        assert_eq!(Regime::Med.weights(DstBase::Gram), (7.0, 100.0));
        assert!("extreme".parse::<Regime>().is_err());
    }
}
