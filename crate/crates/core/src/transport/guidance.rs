//! User guidance expressed on feature grids.

use super::{CostMask, DistanceMatrix};
use crate::error::{invalid, shape_err, Result};

/// A clicked point pair in pixel coordinates, `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointPair {
    pub content: [f64; 2],
    pub style: [f64; 2],
}

/// Expands every click into a 3x3 lattice (the click plus its 8 neighbors
/// at `spacing` pixels), clamped to the image bounds, with duplicates
/// removed. Dimensions are `(height, width)`.
pub fn expand_point_guidance(
    points: &[PointPair],
    spacing: f64,
    content_dims: (usize, usize),
    style_dims: (usize, usize),
) -> Vec<PointPair> {
    let clamp = |p: [f64; 2], dx: f64, dy: f64, (h, w): (usize, usize)| {
        [(p[0] + dx).clamp(0.0, (w - 1) as f64), (p[1] + dy).clamp(0.0, (h - 1) as f64)]
    };
    let mut out: Vec<PointPair> = Vec::new();
    for p in points {
        for dy in [-1.0, 0.0, 1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                let q = PointPair {
                    content: clamp(p.content, dx * spacing, dy * spacing, content_dims),
                    style: clamp(p.style, dx * spacing, dy * spacing, style_dims),
                };
                if !out.contains(&q) {
                    out.push(q);
                }
            }
        }
    }
    out
}

/// Grid cell containing pixel `[x, y]` of an `h x w` image.
pub(crate) fn pixel_to_cell(p: [f64; 2], (h, w): (usize, usize), (gh, gw): (usize, usize)) -> (usize, usize) {
    let r = ((p[1].max(0.0) * gh as f64 / h as f64) as usize).min(gh - 1);
    let c = ((p[0].max(0.0) * gw as f64 / w as f64) as usize).min(gw - 1);
    (r, c)
}

/// Downsamples a pixel mask to a grid: a cell is in the region when at
/// least half its pixels are, or, if that leaves the region empty, when any
/// of its pixels is.
pub(crate) fn mask_to_grid(mask: &[bool], (h, w): (usize, usize), (gh, gw): (usize, usize)) -> Vec<bool> {
    let mut hit = vec![0usize; gh * gw];
    let mut total = vec![0usize; gh * gw];
    for y in 0..h {
        let r = y * gh / h;
        for x in 0..w {
            let k = r * gw + x * gw / w;
            total[k] += 1;
            hit[k] += usize::from(mask[y * w + x]);
        }
    }
    let major: Vec<bool> = hit.iter().zip(&total).map(|(&a, &t)| t > 0 && 2 * a >= t && a > 0).collect();
    if major.iter().any(|&b| b) {
        major
    } else {
        hit.iter().map(|&a| a > 0).collect()
    }
}

/// Region pairs resolved onto a content grid and a style grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGuidance {
    content_grid: (usize, usize),
    style_grid: (usize, usize),
    pairs: Vec<(Vec<bool>, Vec<bool>)>,
    beta: f64,
}

impl GridGuidance {
    pub fn new(content_grid: (usize, usize), style_grid: (usize, usize), beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("guidance weight must be positive, got {beta}")));
        }
        Ok(Self { content_grid, style_grid, pairs: Vec::new(), beta })
    }

    /// Adds a pair of cell masks (row-major over each grid).
    pub fn push_cells(&mut self, content: Vec<bool>, style: Vec<bool>) -> Result<()> {
        let (ch, cw) = self.content_grid;
        let (sh, sw) = self.style_grid;
        if content.len() != ch * cw || style.len() != sh * sw {
            return Err(shape_err("guidance mask does not match its grid"));
        }
        if !content.iter().any(|&b| b) || !style.iter().any(|&b| b) {
            return Err(invalid(format!("guidance region pair {} is empty", self.pairs.len())));
        }
        self.pairs.push((content, style));
        Ok(())
    }

    /// Adds a region pair from full-resolution pixel masks.
    pub fn push_masks(
        &mut self,
        content: &[bool],
        content_dims: (usize, usize),
        style: &[bool],
        style_dims: (usize, usize),
    ) -> Result<()> {
        if content.len() != content_dims.0 * content_dims.1 || style.len() != style_dims.0 * style_dims.1 {
            return Err(shape_err("pixel mask does not match its image"));
        }
        let c = mask_to_grid(content, content_dims, self.content_grid);
        let s = mask_to_grid(style, style_dims, self.style_grid);
        self.push_cells(c, s)
    }

    /// Adds one singleton region pair per point.
    pub fn push_points(&mut self, points: &[PointPair], content_dims: (usize, usize), style_dims: (usize, usize)) -> Result<()> {
        for p in points {
            let (cr, cc) = pixel_to_cell(p.content, content_dims, self.content_grid);
            let (sr, sc) = pixel_to_cell(p.style, style_dims, self.style_grid);
            let mut c = vec![false; self.content_grid.0 * self.content_grid.1];
            let mut s = vec![false; self.style_grid.0 * self.style_grid.1];
            c[cr * self.content_grid.1 + cc] = true;
            s[sr * self.style_grid.1 + sc] = true;
            self.push_cells(c, s)?;
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn content_grid(&self) -> (usize, usize) {
        self.content_grid
    }

    pub fn style_grid(&self) -> (usize, usize) {
        self.style_grid
    }

    pub fn pairs(&self) -> &[(Vec<bool>, Vec<bool>)] {
        &self.pairs
    }
}

fn cell_index(coord: (usize, usize), (gh, gw): (usize, usize)) -> Result<usize> {
    if coord.0 >= gh || coord.1 >= gw {
        return Err(invalid(format!("coordinate {coord:?} outside {gh}x{gw} grid")));
    }
    Ok(coord.0 * gw + coord.1)
}

/// Per-entry guidance for costs between content-side `src` and style-side
/// `dst` coordinates: entries pairing a cell of a content region with a
/// cell of its style region are weighted by beta; entries from a constrained
/// content cell to a style cell outside all of its paired regions are
/// forbidden.
pub fn guidance_mask(g: &GridGuidance, src: &[(usize, usize)], dst: &[(usize, usize)]) -> Result<CostMask> {
    if g.is_empty() {
        return Ok(CostMask::default());
    }
    let si: Vec<usize> = src.iter().map(|&c| cell_index(c, g.content_grid)).collect::<Result<_>>()?;
    let dj: Vec<usize> = dst.iter().map(|&c| cell_index(c, g.style_grid)).collect::<Result<_>>()?;
    let (n, m) = (src.len(), dst.len());
    let mut weights = vec![1.0; n * m];
    let mut forbidden = vec![false; n * m];
    let (mut any_w, mut any_f) = (false, false);
    for (i, &ci) in si.iter().enumerate() {
        let regions: Vec<&Vec<bool>> = g.pairs.iter().filter(|(c, _)| c[ci]).map(|(_, s)| s).collect();
        if regions.is_empty() {
            continue;
        }
        for (j, &cj) in dj.iter().enumerate() {
            if regions.iter().any(|s| s[cj]) {
                weights[i * m + j] = g.beta;
                any_w = true;
            } else {
                forbidden[i * m + j] = true;
                any_f = true;
            }
        }
    }
    Ok(CostMask { weights: any_w.then_some(weights), forbidden: any_f.then_some(forbidden) })
}

/// Applies [`guidance_mask`] to a plain cost matrix.
pub fn apply_guidance_costs(
    c: &DistanceMatrix,
    g: &GridGuidance,
    src: &[(usize, usize)],
    dst: &[(usize, usize)],
) -> Result<DistanceMatrix> {
    if src.len() != c.rows() || dst.len() != c.cols() {
        return Err(shape_err("coordinate lists do not match the cost matrix"));
    }
    let mask = guidance_mask(g, src, dst)?;
    let mut out = c.clone();
    if let Some(w) = &mask.weights {
        out.data.iter_mut().zip(w).for_each(|(v, w)| *v *= w);
    }
    match mask.forbidden {
        Some(f) => out.with_forbidden(f),
        None => Ok(out),
    }
}
