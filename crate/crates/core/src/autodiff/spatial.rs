//! Image-shaped operations on `[C, H, W]` tensors: convolution, pooling,
//! bilinear resampling and flow-field sampling.
//!
//! All bilinear operations share one convention: pixel centers sit at
//! integer coordinates, resizes align half-pixel centers, and reads outside
//! the raster clamp to the border.

use super::gemm::{gemm, MatRef};
use super::{Op, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Upper bound on the number of `f64`s materialized by one im2col chunk.
const IM2COL_BUDGET: usize = 1 << 21;

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(format!("{what} expects [C, H, W], got {shape:?}"))),
    }
}

fn im2col(x: &[f64], (c, h, w): (usize, usize, usize), g: &ConvGeom, p0: usize, p1: usize, cols: &mut [f64]) {
    let len = p1 - p0;
    let k = g.k;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * len..(row + 1) * len];
                for (t, p) in (p0..p1).enumerate() {
                    let (oy, ox) = (p / g.out_w, p % g.out_w);
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    dst[t] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        x[(ci * h + iy as usize) * w + ix as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

fn col2im(cols: &[f64], (c, h, w): (usize, usize, usize), g: &ConvGeom, p0: usize, p1: usize, dx: &mut [f64]) {
    let len = p1 - p0;
    let k = g.k;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * len..(row + 1) * len];
                for (t, p) in (p0..p1).enumerate() {
                    let (oy, ox) = (p / g.out_w, p % g.out_w);
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        dx[(ci * h + iy as usize) * w + ix as usize] += src[t];
                    }
                }
            }
        }
    }
}

fn chunk_len(kdim: usize, positions: usize) -> usize {
    (IM2COL_BUDGET / kdim.max(1)).clamp(1, positions.max(1))
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `self: [C, H, W]` with `kernel: [O, C, k, k]`
    /// (odd `k`), zero padding.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let (x, wt) = (self.value(), kernel.value());
        let (c, h, w) = chw(x.shape(), "conv2d input")?;
        let &[o, kc, k, k2] = wt.shape() else {
            return Err(shape_err(format!("conv2d kernel must be [O, C, k, k], got {:?}", wt.shape())));
        };
        if kc != c || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(shape_err(format!(
                "conv2d kernel {:?} incompatible with input {:?} (odd square kernels only)",
                wt.shape(),
                x.shape()
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("conv2d input smaller than kernel"));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { k, stride, pad, out_h, out_w };
        let positions = out_h * out_w;
        let kdim = c * k * k;
        let mut out = vec![0.0; o * positions];
        let step = chunk_len(kdim, positions);
        let mut cols = vec![0.0; kdim * step];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + step).min(positions);
            let len = p1 - p0;
            im2col(x.data(), (c, h, w), &geom, p0, p1, &mut cols[..kdim * len]);
            gemm(
                1.0,
                MatRef::row_major(wt.data(), o, kdim),
                MatRef::row_major(&cols[..kdim * len], kdim, len),
                0.0,
                &mut out[p0..],
                positions,
            );
            p0 = p1;
        }
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(
            Tensor { shape: vec![o, out_h, out_w], data: out },
            Op::Conv2d(self.id, kernel.id, geom),
            rg,
        ))
    }

    /// 2x average pooling; odd trailing rows/columns are clamped (averaged
    /// with themselves), giving `ceil(H/2) x ceil(W/2)`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = chw(x.shape(), "avg_pool2")?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let out = pool_planes(x.data(), c, (h, w));
        Ok(self.tape.push(Tensor { shape: vec![c, oh, ow], data: out }, Op::AvgPool2(self.id), self.requires_grad()))
    }

    /// Bilinear resize of `[C, H, W]` to `[C, h, w]`.
    pub fn resize_bilinear(self, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, ih, iw) = chw(x.shape(), "resize")?;
        if h == 0 || w == 0 || ih == 0 || iw == 0 {
            return Err(shape_err("resize to or from an empty raster"));
        }
        let data = resize_planes(x.data(), c, (ih, iw), (h, w));
        Ok(self.tape.push(Tensor { shape: vec![c, h, w], data }, Op::Resize(self.id), self.requires_grad()))
    }

    /// Samples `self: [C, H, W]` at `q + flow(q)` for every pixel `q`, where
    /// `flow: [2, H, W]` holds (dx, dy) offsets in pixels.
    pub fn grid_sample(self, flow: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&flow);
        let (img, fl) = (self.value(), flow.value());
        let (c, h, w) = chw(img.shape(), "grid_sample image")?;
        if fl.shape() != [2, h, w] {
            return Err(shape_err(format!("flow {:?} does not match image {:?}", fl.shape(), img.shape())));
        }
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            let s = Sample::at(p, fl.data(), h, w);
            for ci in 0..c {
                out[ci * h * w + p] = s.read(&img.data()[ci * h * w..(ci + 1) * h * w], w);
            }
        }
        let rg = self.requires_grad() || flow.requires_grad();
        Ok(self.tape.push(Tensor { shape: vec![c, h, w], data: out }, Op::GridSample(self.id, flow.id), rg))
    }
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    wt: &Tensor,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = wt.shape()[0];
    let kdim = c * g.k * g.k;
    let positions = g.out_h * g.out_w;
    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = needs[1].then(|| vec![0.0; wt.len()]);
    let step = chunk_len(kdim, positions);
    let mut cols = vec![0.0; kdim * step];
    let mut p0 = 0;
    while p0 < positions {
        let p1 = (p0 + step).min(positions);
        let len = p1 - p0;
        let gy = MatRef { data: &grad[p0..], rows: o, cols: len, rs: positions as isize, cs: 1 };
        if let Some(dw) = dw.as_mut() {
            im2col(x.data(), (c, h, w), g, p0, p1, &mut cols[..kdim * len]);
            gemm(1.0, gy, MatRef::row_major(&cols[..kdim * len], kdim, len).t(), 1.0, dw, kdim);
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = &mut cols[..kdim * len];
            gemm(1.0, MatRef::row_major(wt.data(), o, kdim).t(), gy, 0.0, dcols, len);
            col2im(dcols, (c, h, w), g, p0, p1, dx);
        }
        p0 = p1;
    }
    vec![dx, dw]
}

/// 2x box downsample of `c` planar channels with border clamping.
pub(crate) fn pool_planes(x: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let at = |y: usize, xx: usize| x[(ci * h + y) * w + xx];
                out[(ci * oh + oy) * ow + ox] = 0.25 * (at(y0, x0) + at(y0, x1) + at(y1, x0) + at(y1, x1));
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(shape: &[usize], grad: &[f64]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let gv = 0.25 * grad[(ci * oh + oy) * ow + ox];
                for (y, xx) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)] {
                    dx[(ci * h + y) * w + xx] += gv;
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for each output index of a 1-D bilinear
/// resize with half-pixel-center alignment and border clamping.
pub(crate) fn interp_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resizes `c` planar channels; shared by the tape op and plain image code.
pub(crate) fn resize_planes(x: &[f64], c: usize, (ih, iw): (usize, usize), (h, w): (usize, usize)) -> Vec<f64> {
    let ty = interp_taps(ih, h);
    let tx = interp_taps(iw, w);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &x[ci * ih * iw..(ci + 1) * ih * iw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (r0, r1) = (&plane[y0 * iw..(y0 + 1) * iw], &plane[y1 * iw..(y1 + 1) * iw]);
            let dst = &mut out[(ci * h + oy) * w..(ci * h + oy + 1) * w];
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&tx) {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                *d = top + fy * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn resize_backward(in_shape: &[usize], out_shape: &[usize], grad: &[f64]) -> Vec<f64> {
    let (c, ih, iw) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h, w) = (out_shape[1], out_shape[2]);
    let ty = interp_taps(ih, h);
    let tx = interp_taps(iw, w);
    let mut dx = vec![0.0; c * ih * iw];
    for ci in 0..c {
        let plane = &mut dx[ci * ih * iw..(ci + 1) * ih * iw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = grad[(ci * h + oy) * w + ox];
                plane[y0 * iw + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * iw + x1] += g * (1.0 - fy) * fx;
                plane[y1 * iw + x0] += g * fy * (1.0 - fx);
                plane[y1 * iw + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Bilinear tap for one destination pixel of a flow-field warp.
struct Sample {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the unclamped coordinate lies strictly inside the raster
    /// along each axis (clamped reads carry no positional gradient).
    inside_x: bool,
    inside_y: bool,
}

impl Sample {
    fn at(p: usize, flow: &[f64], h: usize, w: usize) -> Self {
        let (oy, ox) = (p / w, p % w);
        let sx = ox as f64 + flow[p];
        let sy = oy as f64 + flow[h * w + p];
        let (cx, cy) = (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64));
        let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
        Sample {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: cx - x0 as f64,
            fy: cy - y0 as f64,
            inside_x: sx > 0.0 && sx < (w - 1) as f64,
            inside_y: sy > 0.0 && sy < (h - 1) as f64,
        }
    }

    fn read(&self, plane: &[f64], w: usize) -> f64 {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        // Integer positions return the stored value untouched (signed zeros
        // and all), which makes a zero flow an exact identity.
        let lerp = |u: f64, v: f64, t: f64| if t == 0.0 { u } else { u + t * (v - u) };
        lerp(lerp(a, b, self.fx), lerp(c, d, self.fx), self.fy)
    }
}

pub(crate) fn grid_sample_backward(img: &Tensor, flow: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let hw = h * w;
    let mut dimg = needs[0].then(|| vec![0.0; img.len()]);
    let mut dflow = needs[1].then(|| vec![0.0; flow.len()]);
    for p in 0..hw {
        let s = Sample::at(p, flow.data(), h, w);
        for ci in 0..c {
            let g = grad[ci * hw + p];
            if let Some(di) = dimg.as_mut() {
                let plane = &mut di[ci * hw..(ci + 1) * hw];
                plane[s.y0 * w + s.x0] += g * (1.0 - s.fy) * (1.0 - s.fx);
                plane[s.y0 * w + s.x1] += g * (1.0 - s.fy) * s.fx;
                plane[s.y1 * w + s.x0] += g * s.fy * (1.0 - s.fx);
                plane[s.y1 * w + s.x1] += g * s.fy * s.fx;
            }
            if let Some(df) = dflow.as_mut() {
                let plane = &img.data()[ci * hw..(ci + 1) * hw];
                let a = plane[s.y0 * w + s.x0];
                let b = plane[s.y0 * w + s.x1];
                let cc = plane[s.y1 * w + s.x0];
                let d = plane[s.y1 * w + s.x1];
                if s.inside_x {
                    df[p] += g * ((1.0 - s.fy) * (b - a) + s.fy * (d - cc));
                }
                if s.inside_y {
                    df[hw + p] += g * ((1.0 - s.fx) * (cc - a) + s.fx * (d - b));
                }
            }
        }
    }
    vec![dimg, dflow]
}
