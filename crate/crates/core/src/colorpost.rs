//! Luminance-preserving color post-processing: keep the stylized L
//! channel, take the content's AB channels filtered along the stylized
//! edges, then match their color moments to the style.

use nalgebra::{DMatrix, DVector};

use crate::color::{lab_to_rgb, rgb_to_lab};
use crate::error::{invalid, shape_err, Result};
use crate::image::{ColorSpace, ImageBuffer};

/// Largest AB covariance entry (AB scaled by 1/256) below which a style
/// counts as monochrome.
pub const MONOCHROME_THRESHOLD: f64 = 4e-5;
const MOMENT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ColorPostConfig {
    pub enabled: bool,
    /// Spatial standard deviation in pixels.
    pub sigma_s: f64,
    /// Range standard deviation in L units.
    pub sigma_r: f64,
}

impl Default for ColorPostConfig {
    fn default() -> Self {
        Self { enabled: true, sigma_s: 5.0, sigma_r: 10.0 }
    }
}

/// Filters a multi-channel image with weights from a spatial Gaussian and a
/// range Gaussian on differences of the single-channel `guide`. The window
/// is `(2 ceil(3 sigma_s) + 1)^2`, cut at the border.
pub fn guided_bilateral_filter(src: &ImageBuffer, guide: &ImageBuffer, sigma_s: f64, sigma_r: f64) -> Result<ImageBuffer> {
    if !(sigma_s > 0.0 && sigma_r > 0.0) {
        return Err(invalid(format!("bilateral sigmas must be positive, got {sigma_s} and {sigma_r}")));
    }
    let (h, w, c) = (src.height(), src.width(), src.channels());
    if guide.channels() != 1 || (guide.height(), guide.width()) != (h, w) {
        return Err(shape_err("guide must be a single channel of the same size"));
    }
    let r = (3.0 * sigma_s).ceil() as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_s * sigma_s)).exp()))
        .collect();
    let side = (2 * r + 1) as usize;
    let g = guide.data();
    let s = src.data();
    let mut out = src.clone();
    let dst = out.data_mut();
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let gc = g[y * w + x];
            let mut wsum = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            let (y0, y1) = ((y as isize - r).max(0) as usize, ((y as isize + r) as usize).min(h - 1));
            let (x0, x1) = ((x as isize - r).max(0) as usize, ((x as isize + r) as usize).min(w - 1));
            for yy in y0..=y1 {
                let row = (yy as isize - y as isize + r) as usize * side;
                for xx in x0..=x1 {
                    let d = g[yy * w + xx] - gc;
                    let wt = spatial[row + (xx as isize - x as isize + r) as usize]
                        * (-(d * d) / (2.0 * sigma_r * sigma_r)).exp();
                    wsum += wt;
                    let p = &s[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += wt * v);
                }
            }
            let o = &mut dst[(y * w + x) * c..(y * w + x + 1) * c];
            o.iter_mut().zip(&acc).for_each(|(o, a)| *o = a / wsum);
        }
    }
    Ok(out)
}

fn moments(rows: &[f64], k: usize, channels: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let d = channels.len();
    let n = rows.len() / k;
    let mut mean = DVector::zeros(d);
    for px in rows.chunks_exact(k) {
        for (i, &c) in channels.iter().enumerate() {
            mean[i] += px[c];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for px in rows.chunks_exact(k) {
        let v = DVector::from_iterator(d, channels.iter().map(|&c| px[c])) - &mean;
        cov += &v * v.transpose();
    }
    cov /= n as f64;
    (mean, cov)
}

fn sym_pow(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).powf(p)));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Affine map `x -> A (x - mu_img) + mu_style` on the listed channels with
/// `A = Sigma_style^(1/2) Sigma_img^(-1/2)` (both regularized by `eps I`).
fn match_channels(img: &ImageBuffer, style: &ImageBuffer, channels: &[usize]) -> ImageBuffer {
    let k = img.channels();
    let (mi, ci) = moments(img.data(), k, channels);
    let (ms, cs) = moments(style.data(), style.channels(), channels);
    let reg = DMatrix::identity(channels.len(), channels.len()) * MOMENT_EPS;
    let a = sym_pow(&(cs + &reg), 0.5) * sym_pow(&(ci + &reg), -0.5);
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(k) {
        let v = DVector::from_iterator(channels.len(), channels.iter().map(|&c| px[c])) - &mi;
        let y = &a * v + &ms;
        for (i, &c) in channels.iter().enumerate() {
            px[c] = y[i];
        }
    }
    out
}

fn clamp_lab(mut img: ImageBuffer) -> ImageBuffer {
    for px in img.data_mut().chunks_exact_mut(3) {
        px[0] = px[0].clamp(0.0, 100.0);
        px[1] = px[1].clamp(-128.0, 128.0);
        px[2] = px[2].clamp(-128.0, 128.0);
    }
    img
}

fn expect_lab(img: &ImageBuffer) -> Result<()> {
    img.expect(ColorSpace::Lab)?;
    if img.channels() != 3 {
        return Err(shape_err("Lab image must have 3 channels"));
    }
    Ok(())
}

/// Moment matching on all three Lab channels without the gamut clamp.
pub fn match_color_moments_unclamped(img: &ImageBuffer, style: &ImageBuffer) -> Result<ImageBuffer> {
    expect_lab(img)?;
    expect_lab(style)?;
    Ok(match_channels(img, style, &[0, 1, 2]))
}

/// Moment matching on all three Lab channels, clamped to the Lab gamut.
pub fn match_color_moments(img: &ImageBuffer, style: &ImageBuffer) -> Result<ImageBuffer> {
    Ok(clamp_lab(match_color_moments_unclamped(img, style)?))
}

/// Largest absolute entry of the AB covariance with AB scaled to
/// `[-0.5, 0.5]`.
pub fn ab_covariance_peak(style: &ImageBuffer) -> Result<f64> {
    expect_lab(style)?;
    let (_, cov) = moments(style.data(), 3, &[1, 2]);
    Ok(cov.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (256.0 * 256.0))
}

pub fn is_monochrome(style: &ImageBuffer) -> Result<bool> {
    Ok(ab_covariance_peak(style)? < MONOCHROME_THRESHOLD)
}

/// Lab result of the post-processing chain. The L channel is exactly the
/// L channel of `rgb_to_lab(stylized)`; only AB are replaced. Returns
/// `None` when the step is disabled or the style is monochrome.
pub fn post_process_lab(
    stylized: &ImageBuffer,
    content: &ImageBuffer,
    style: &ImageBuffer,
    cfg: &ColorPostConfig,
) -> Result<Option<ImageBuffer>> {
    stylized.expect_rgb()?;
    content.expect_rgb()?;
    let style_lab = rgb_to_lab(style)?;
    if !cfg.enabled || is_monochrome(&style_lab)? {
        return Ok(None);
    }
    let (h, w) = (stylized.height(), stylized.width());
    let content = if (content.height(), content.width()) == (h, w) {
        content.clone()
    } else {
        content.resize_bilinear(h, w)?
    };
    let out_lab = rgb_to_lab(stylized)?;
    let content_lab = rgb_to_lab(&content)?;
    let l = out_lab.channel(0)?;
    let ab_data: Vec<f64> = content_lab.data().chunks_exact(3).flat_map(|p| [p[1], p[2]]).collect();
    let ab = ImageBuffer::new(h, w, 2, ab_data, ColorSpace::Lab)?;
    let ab = guided_bilateral_filter(&ab, &l, cfg.sigma_s, cfg.sigma_r)?;
    let mut merged = out_lab;
    for (px, f) in merged.data_mut().chunks_exact_mut(3).zip(ab.data().chunks_exact(2)) {
        px[1] = f[0];
        px[2] = f[1];
    }
    let matched = match_channels(&merged, &style_lab, &[1, 2]);
    let mut out = matched;
    for px in out.data_mut().chunks_exact_mut(3) {
        px[1] = px[1].clamp(-128.0, 128.0);
        px[2] = px[2].clamp(-128.0, 128.0);
    }
    Ok(Some(out))
}

/// Full color post-processing returning sRGB clamped to `[0, 1]`. Disabled
/// or monochrome-gated calls return `stylized` unchanged.
pub fn post_process(
    stylized: &ImageBuffer,
    content: &ImageBuffer,
    style: &ImageBuffer,
    cfg: &ColorPostConfig,
) -> Result<ImageBuffer> {
    match post_process_lab(stylized, content, style, cfg)? {
        Some(lab) => Ok(lab_to_rgb(&lab)?.clamp01()),
        None => Ok(stylized.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect(), ColorSpace::Srgb).unwrap()
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 1, ColorSpace::Lab, |y, x| vec![f(y, x)]).unwrap()
    }

    #[test]
    fn constant_guide_is_a_gaussian_blur() {
        let src = random_rgb(12, 12, 1);
        let guide = gray(12, 12, |_, _| 50.0);
        let out = guided_bilateral_filter(&src, &guide, 1.0, 10.0).unwrap();
        let (y, x) = (6usize, 6usize);
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for yy in 3..=9usize {
            for xx in 3..=9usize {
                let d2 = ((yy as f64 - y as f64).powi(2) + (xx as f64 - x as f64).powi(2)) / 2.0;
                let wt = (-d2).exp();
                den += wt;
                for k in 0..3 {
                    num[k] += wt * src.pixel(yy, xx)[k];
                }
            }
        }
        for k in 0..3 {
            assert!((out.pixel(y, x)[k] - num[k] / den).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_source_is_unchanged() {
        let src = ImageBuffer::filled(9, 7, &[3.0, -2.0], ColorSpace::Lab).unwrap();
        let guide = gray(9, 7, |y, x| (y * 7 + x) as f64);
        let out = guided_bilateral_filter(&src, &guide, 2.0, 5.0).unwrap();
        for (a, b) in out.data().iter().zip(src.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edges_move_toward_the_guide() {
        // guide steps at x = 10, source steps at x = 12
        let w = 24;
        let guide = gray(1, w, |_, x| if x < 10 { 0.0 } else { 100.0 });
        let src = ImageBuffer::from_fn(1, w, 1, ColorSpace::Lab, |_, x| vec![if x < 12 { 0.0 } else { 1.0 }]).unwrap();
        let out = guided_bilateral_filter(&src, &guide, 3.0, 5.0).unwrap();
        let v = out.data();
        assert!(v[10] > 0.5 && v[11] > 0.5, "right of the guide edge should lean high: {v:?}");
        assert!(v[9] < 0.05, "left of the guide edge stays low: {v:?}");
        assert!(v.windows(2).all(|p| p[1] >= p[0] - 1e-12), "profile stays monotone");
    }

    #[test]
    fn rejects_bad_sigmas() {
        let src = ImageBuffer::filled(2, 2, &[0.0], ColorSpace::Lab).unwrap();
        assert!(guided_bilateral_filter(&src, &src, 0.0, 1.0).is_err());
    }

    #[test]
    fn matching_self_is_identity() {
        let lab = rgb_to_lab(&random_rgb(10, 10, 2)).unwrap();
        let out = match_color_moments(&lab, &lab).unwrap();
        for (a, b) in out.data().iter().zip(lab.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn matched_moments_equal_style() {
        let img = rgb_to_lab(&random_rgb(16, 16, 3)).unwrap();
        let style = rgb_to_lab(&random_rgb(12, 20, 4).resize_bilinear(12, 20).unwrap()).unwrap();
        let out = match_color_moments_unclamped(&img, &style).unwrap();
        let (mo, co) = moments(out.data(), 3, &[0, 1, 2]);
        let (ms, cs) = moments(style.data(), 3, &[0, 1, 2]);
        assert!((mo - ms).amax() < 1e-3);
        assert!((co - cs).amax() < 1e-3);
    }

    #[test]
    fn grayscale_image_takes_style_mean() {
        let img = rgb_to_lab(&ImageBuffer::from_fn(8, 8, 3, ColorSpace::Srgb, |y, x| vec![(y * 8 + x) as f64 / 64.0; 3]).unwrap()).unwrap();
        let style = rgb_to_lab(&random_rgb(8, 8, 5)).unwrap();
        let out = match_color_moments(&img, &style).unwrap();
        let (mo, _) = moments(out.data(), 3, &[0, 1, 2]);
        let (ms, _) = moments(style.data(), 3, &[0, 1, 2]);
        assert!((mo - ms).amax() < 1e-3);
    }

    #[test]
    fn monochrome_gate() {
        let grayscale = ImageBuffer::from_fn(8, 8, 3, ColorSpace::Srgb, |y, _| vec![y as f64 / 8.0; 3]).unwrap();
        assert!(is_monochrome(&rgb_to_lab(&grayscale).unwrap()).unwrap());
        let two = ImageBuffer::from_fn(8, 8, 3, ColorSpace::Srgb, |_, x| if x < 4 { vec![1.0, 0.0, 0.0] } else { vec![0.0, 0.0, 1.0] }).unwrap();
        assert!(!is_monochrome(&rgb_to_lab(&two).unwrap()).unwrap());
        // a = +/- t on half the pixels each gives var(a) = t^2, so the scaled
        // peak is t^2 / 256^2; flip at 4e-5
        let t_edge = (MONOCHROME_THRESHOLD).sqrt() * 256.0;
        let build = |t: f64| {
            ImageBuffer::from_fn(4, 4, 3, ColorSpace::Lab, |y, _| vec![50.0, if y < 2 { t } else { -t }, 0.0]).unwrap()
        };
        assert!(is_monochrome(&build(t_edge * 0.999)).unwrap());
        assert!(!is_monochrome(&build(t_edge * 1.001)).unwrap());
    }

    #[test]
    fn post_process_preserves_lightness_and_gates() {
        let stylized = random_rgb(16, 16, 6);
        let content = random_rgb(16, 16, 7);
        let style = random_rgb(16, 16, 8);
        let cfg = ColorPostConfig::default();
        let lab = post_process_lab(&stylized, &content, &style, &cfg).unwrap().unwrap();
        let l_in = rgb_to_lab(&stylized).unwrap();
        for (a, b) in lab.data().chunks_exact(3).zip(l_in.data().chunks_exact(3)) {
            assert_eq!(a[0], b[0]);
        }
        let off = ColorPostConfig { enabled: false, ..cfg };
        assert_eq!(post_process(&stylized, &content, &style, &off).unwrap(), stylized);
        let gray_style = ImageBuffer::from_fn(16, 16, 3, ColorSpace::Srgb, |_, x| vec![x as f64 / 16.0; 3]).unwrap();
        assert_eq!(post_process(&stylized, &content, &gray_style, &cfg).unwrap(), stylized);
    }

    #[test]
    fn fixed_point_when_all_inputs_agree() {
        let img = ImageBuffer::from_fn(24, 24, 3, ColorSpace::Srgb, |y, x| {
            vec![0.3 + 0.4 * (x as f64 / 24.0), 0.5, 0.7 - 0.3 * (y as f64 / 24.0)]
        })
        .unwrap();
        let out = post_process(&img, &img, &img, &ColorPostConfig::default()).unwrap();
        let mad: f64 = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.data().len() as f64;
        assert!(mad < 0.02, "{mad}");
    }
}
