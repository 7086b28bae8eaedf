//! Style transfer by nearest-neighbor feature targets.
//!
//! Every content hypercolumn is replaced by its nearest style hypercolumn
//! (zero-centered cosine distance, style pooled over four rotations) and
//! the output is optimized to match those targets. Scales run coarse to
//! fine; at the finest scale a splitting phase re-matches each layer
//! separately against the current output after every update.

use std::ops::Range;

use crate::autodiff::gemm::{gemm, MatRef};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::features::{grid_dims, FeatureTensor, FilterBank, FilterBankSpec, MIN_SIDE};
use crate::image::{scaled_dims, ColorSpace, ImageBuffer};
use crate::optim::{Adam, Optimizer};
use crate::progress::{wants_preview, Observer, Progress};
use crate::pyramid::{collapse_vars, max_levels, LaplacianPyramid};

const TILE_ROWS: usize = 1024;
const TILE_COLS: usize = 4096;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NnstConfig {
    /// Weight of the previous scale's output in the matching source.
    pub alpha_blend: f64,
    pub scales: usize,
    /// Long side of the finest scale; `None` keeps the content size.
    pub long_side: Option<usize>,
    pub updates: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pyramid_levels: usize,
    pub split_phase: bool,
    pub split_updates: usize,
    pub rotations: bool,
    /// Accepted for interface parity; the pipeline has no random choices.
    pub seed: u64,
    pub bank: FilterBankSpec,
}

impl Default for NnstConfig {
    fn default() -> Self {
        Self {
            alpha_blend: 0.25,
            scales: 4,
            long_side: None,
            updates: 200,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pyramid_levels: 8,
            split_phase: true,
            split_updates: 200,
            rotations: true,
            seed: 0,
            bank: FilterBankSpec::default(),
        }
    }
}

impl NnstConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_blend) {
            return Err(invalid(format!("alpha-blend must be in [0, 1], got {}", self.alpha_blend)));
        }
        if self.scales == 0 || self.pyramid_levels == 0 {
            return Err(invalid("scales and pyramid levels must be >= 1"));
        }
        Ok(())
    }
}

/// Where a target vector (or one layer block of it) was copied from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceRef {
    pub rotation: usize,
    pub index: usize,
}

/// Target hypercolumns on the content grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFeatures {
    grid: (usize, usize),
    dim: usize,
    data: Vec<f64>,
    blocks: Vec<Range<usize>>,
    /// `cells x blocks`, row-major.
    sources: Vec<SourceRef>,
}

impl TargetFeatures {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn source(&self, cell: usize, block: usize) -> SourceRef {
        self.sources[cell * self.blocks.len() + block]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.grid.0 * self.grid.1, self.dim], self.data.clone()).expect("consistent dims")
    }
}

fn column_mean(tensors: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for t in tensors {
        for row in t.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            n += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Rows restricted to `range`, optionally centered, scaled to unit norm.
/// Zero rows stay zero, which puts them at cosine distance 1 from
/// everything.
fn unit_block(data: &[f64], dim: usize, range: &Range<usize>, mean: Option<&[f64]>) -> Vec<f64> {
    let len = range.len();
    let mut out = Vec::with_capacity(data.len() / dim * len);
    for row in data.chunks_exact(dim) {
        let start = out.len();
        out.extend_from_slice(&row[range.clone()]);
        let r = &mut out[start..];
        if let Some(m) = mean {
            r.iter_mut().zip(&m[range.clone()]).for_each(|(v, m)| *v -= m);
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// For each query row, the first pool row with the largest dot product.
fn argmax_dots(q: &[f64], p: &[f64], k: usize, tile: (usize, usize)) -> Vec<usize> {
    let (nq, np) = (q.len() / k, p.len() / k);
    let mut best = vec![(f64::NEG_INFINITY, 0usize); nq];
    let mut buf = vec![0.0; tile.0.min(nq) * tile.1.min(np)];
    for r0 in (0..nq).step_by(tile.0) {
        let r1 = (r0 + tile.0).min(nq);
        for c0 in (0..np).step_by(tile.1) {
            let c1 = (c0 + tile.1).min(np);
            let w = c1 - c0;
            let a = MatRef::row_major(&q[r0 * k..r1 * k], r1 - r0, k);
            let b = MatRef::row_major(&p[c0 * k..c1 * k], w, k).t();
            gemm(1.0, a, b, 0.0, &mut buf, w);
            for (i, row) in buf.chunks_exact(w).take(r1 - r0).enumerate() {
                let slot = &mut best[r0 + i];
                for (j, &v) in row.iter().enumerate() {
                    if v > slot.0 {
                        *slot = (v, c0 + j);
                    }
                }
            }
        }
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Nearest-neighbor targets for every content cell.
///
/// `blocks = None` matches whole hypercolumns; otherwise each channel range
/// is matched independently and the winners are spliced together. Pool
/// indices run over the tensors in order, cells row-major within each.
pub fn match_features(
    content: &FeatureTensor,
    pool: &[FeatureTensor],
    centered: bool,
    blocks: Option<&[Range<usize>]>,
) -> Result<TargetFeatures> {
    match_features_tiled(content, pool, centered, blocks, (TILE_ROWS, TILE_COLS))
}

fn match_features_tiled(
    content: &FeatureTensor,
    pool: &[FeatureTensor],
    centered: bool,
    blocks: Option<&[Range<usize>]>,
    tile: (usize, usize),
) -> Result<TargetFeatures> {
    let dim = content.dim();
    if pool.is_empty() || pool.iter().all(|t| t.cells() == 0) {
        return Err(invalid("empty style pool"));
    }
    if let Some(t) = pool.iter().find(|t| t.dim() != dim) {
        return Err(shape_err(format!("style features have dim {}, content has {dim}", t.dim())));
    }
    let blocks: Vec<Range<usize>> = match blocks {
        Some(b) => {
            let mut expect = 0;
            for r in b {
                if r.start != expect || r.end <= r.start {
                    return Err(shape_err(format!("layer blocks must tile 0..{dim} in order")));
                }
                expect = r.end;
            }
            if expect != dim {
                return Err(shape_err(format!("layer blocks must tile 0..{dim} in order")));
            }
            b.to_vec()
        }
        None => vec![0..dim],
    };
    let pool_data: Vec<&[f64]> = pool.iter().map(FeatureTensor::data).collect();
    let (mu_c, mu_s) = if centered {
        (Some(column_mean(&[content.data()], dim)), Some(column_mean(&pool_data, dim)))
    } else {
        (None, None)
    };
    let mut offsets = Vec::with_capacity(pool.len());
    let mut flat = Vec::new();
    for t in pool {
        offsets.push(flat.len() / dim);
        flat.extend_from_slice(t.data());
    }
    let locate = |j: usize| {
        let r = offsets.partition_point(|&o| o <= j) - 1;
        SourceRef { rotation: r, index: j - offsets[r] }
    };
    let cells = content.cells();
    let nb = blocks.len();
    let mut data = vec![0.0; cells * dim];
    let mut sources = vec![SourceRef { rotation: 0, index: 0 }; cells * nb];
    for (b, range) in blocks.iter().enumerate() {
        let q = unit_block(content.data(), dim, range, mu_c.as_deref());
        let p = unit_block(&flat, dim, range, mu_s.as_deref());
        let winners = argmax_dots(&q, &p, range.len(), tile);
        for (i, &j) in winners.iter().enumerate() {
            data[i * dim + range.start..i * dim + range.end].copy_from_slice(&flat[j * dim + range.start..j * dim + range.end]);
            sources[i * nb + b] = locate(j);
        }
    }
    Ok(TargetFeatures { grid: content.grid(), dim, data, blocks, sources })
}

/// `-(1/P) sum_i cos(o_i, t_i)` for `o: [P, D]` against constant targets.
pub fn nn_objective_var<'t>(o: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    let s = o.shape();
    if s != targets.shape() || s.len() != 2 {
        return Err(shape_err(format!("features {s:?} vs targets {:?}", targets.shape())));
    }
    let t = targets.data();
    let tn: Vec<f64> = t.chunks_exact(s[1]).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if tn.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Degenerate("zero target vector".into()));
    }
    let on = o.square().sum_axis(1)?.sqrt()?;
    if on.value().data().iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Degenerate("zero output feature vector".into()));
    }
    let tape = o.tape();
    let dots = o.mul(tape.constant(targets.clone()))?.sum_axis(1)?;
    let denom = on.mul(tape.constant(Tensor::from_vec(tn)))?;
    Ok(dots.div(denom)?.mean().neg())
}

pub fn nn_objective(output: &FeatureTensor, t: &TargetFeatures) -> Result<f64> {
    if output.grid() != t.grid() {
        return Err(shape_err("output grid differs from the target grid"));
    }
    let tape = Tape::new();
    Ok(nn_objective_var(tape.constant(output.to_tensor()), &t.to_tensor())?.item())
}

fn features_of(bank: &FilterBank, img: &ImageBuffer) -> Result<FeatureTensor> {
    let tape = Tape::new();
    let f = bank.forward(tape.constant(img.to_chw()))?;
    let (gh, gw) = grid_dims(img.height(), img.width());
    FeatureTensor::new(gh, gw, bank.dim(), f.value().data().to_vec())
}

/// Style features at one scale: the image and, optionally, its three
/// other quarter-turn rotations.
pub fn style_pool(bank: &FilterBank, style: &ImageBuffer, rotations: bool) -> Result<Vec<FeatureTensor>> {
    let turns = if rotations { 4 } else { 1 };
    (0..turns).map(|k| features_of(bank, &style.rotate90(k))).collect()
}

/// Record of one optimization pass.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct PassReport {
    pub long_side: usize,
    /// Objective before each update.
    pub losses: Vec<f64>,
}

/// Optimizer state carried across passes over the same parameters.
pub struct Synthesis {
    params: Vec<Tensor>,
    opt: Adam,
}

impl Synthesis {
    pub fn new(init: &ImageBuffer, levels: usize, cfg: &NnstConfig) -> Result<Self> {
        let levels = levels.min(max_levels(init.height(), init.width()));
        let pyr = LaplacianPyramid::build(init, levels)?;
        Ok(Self {
            params: pyr.levels().iter().map(ImageBuffer::to_chw).collect(),
            opt: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?,
        })
    }

    pub fn image(&self) -> Result<ImageBuffer> {
        let levels = self
            .params
            .iter()
            .map(|t| ImageBuffer::from_chw(t, ColorSpace::Srgb))
            .collect::<Result<Vec<_>>>()?;
        LaplacianPyramid::from_levels(levels)?.collapse()
    }

    /// One Adam update. `targets` receives the current output features
    /// and returns the target tensor to match; returns the objective
    /// before the update.
    pub fn update(
        &mut self,
        bank: &FilterBank,
        targets: &mut dyn FnMut(&FeatureTensor) -> Result<Tensor>,
    ) -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let img = collapse_vars(&leaves)?;
        let s = img.shape();
        let feats = bank.forward(img)?;
        let (gh, gw) = grid_dims(s[1], s[2]);
        let current = FeatureTensor::new(gh, gw, bank.dim(), feats.value().data().to_vec())?;
        let t = targets(&current)?;
        let loss = nn_objective_var(feats, &t)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        self.opt.step(&mut self.params, &g)?;
        Ok(value)
    }
}

#[derive(Clone, Debug)]
pub struct NnstOutput {
    /// Result before any color post-processing.
    pub image: ImageBuffer,
    pub passes: Vec<PassReport>,
    /// Objective trace of the splitting phase (empty when disabled).
    pub split_losses: Vec<f64>,
}

/// Long sides of the scales that are run: eighth, quarter, half and full
/// size for four scales, skipping those whose short side would fall below
/// the feature bank minimum.
pub fn scale_sides(h: usize, w: usize, cfg: &NnstConfig) -> Vec<usize> {
    let full = cfg.long_side.unwrap_or(h.max(w));
    (0..cfg.scales)
        .rev()
        .map(|k| full >> k)
        .filter(|&l| {
            let (sh, sw) = scaled_dims(h, w, l);
            sh.min(sw) >= MIN_SIDE
        })
        .collect()
}

fn blend(a: &ImageBuffer, b: &ImageBuffer, alpha: f64) -> ImageBuffer {
    let mut out = b.clone();
    out.data_mut().iter_mut().zip(a.data()).for_each(|(o, x)| *o = alpha * x + (1.0 - alpha) * *o);
    out
}

pub fn stylize(content: &ImageBuffer, style: &ImageBuffer, cfg: &NnstConfig, observer: &dyn Observer) -> Result<NnstOutput> {
    cfg.validate()?;
    content.expect_rgb()?;
    style.expect_rgb()?;
    let sides = scale_sides(content.height(), content.width(), cfg);
    if sides.is_empty() {
        return Err(invalid(format!("content is too small; every scale is below {MIN_SIDE}px")));
    }
    let bank = FilterBank::new(cfg.bank.clone())?;
    let total = sides.len() + usize::from(cfg.split_phase);
    let mut passes = Vec::with_capacity(sides.len());
    let mut prev: Option<ImageBuffer> = None;
    let mut synth: Option<Synthesis> = None;
    let mut pool = Vec::new();
    for (si, &long) in sides.iter().enumerate() {
        let c = content.resize_long_side(long)?;
        let s = style.resize_long_side(long)?;
        if s.height().min(s.width()) < 16 {
            return Err(invalid("style image is too elongated"));
        }
        let (init, source) = match prev.take() {
            None => (c.clone(), c.clone()),
            Some(p) => {
                let up = p.resize_bilinear(c.height(), c.width())?;
                let src = blend(&up, &c, cfg.alpha_blend);
                (up, src)
            }
        };
        pool = style_pool(&bank, &s, cfg.rotations)?;
        let target = match_features(&features_of(&bank, &source)?, &pool, true, None)?.to_tensor();
        let mut sy = Synthesis::new(&init, cfg.pyramid_levels, cfg)?;
        let mut report = PassReport { long_side: long, losses: Vec::with_capacity(cfg.updates) };
        for step in 1..=cfg.updates {
            if observer.cancelled() {
                return Err(Error::Cancelled);
            }
            let loss = sy.update(&bank, &mut |_| Ok(target.clone()))?;
            report.losses.push(loss);
            let p = Progress { scale: si, scales: total, step, steps: cfg.updates, loss };
            observer.on_step(&p);
            if wants_preview(observer, step, cfg.updates) {
                observer.on_preview(&p, &sy.image()?.clamp01());
            }
        }
        passes.push(report);
        prev = Some(sy.image()?);
        synth = Some(sy);
    }
    let mut split_losses = Vec::new();
    let mut sy = synth.expect("at least one scale");
    if cfg.split_phase {
        let blocks = bank.layer_ranges();
        for step in 1..=cfg.split_updates {
            if observer.cancelled() {
                return Err(Error::Cancelled);
            }
            let loss = sy.update(&bank, &mut |cur| Ok(match_features(cur, &pool, true, Some(&blocks))?.to_tensor()))?;
            split_losses.push(loss);
            let p = Progress { scale: sides.len(), scales: total, step, steps: cfg.split_updates, loss };
            observer.on_step(&p);
            if wants_preview(observer, step, cfg.split_updates) {
                observer.on_preview(&p, &sy.image()?.clamp01());
            }
        }
    }
    Ok(NnstOutput { image: sy.image()?.clamp01(), passes, split_losses })
}
