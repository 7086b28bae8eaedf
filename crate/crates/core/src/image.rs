//! Raster container, resampling and 8-bit codec IO.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use crate::autodiff::spatial::{pool_planes, resize_planes};
use crate::autodiff::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    LinearRgb,
    Srgb,
    Lab,
    Opponent,
}

impl ColorSpace {
    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::LinearRgb => "linear-rgb",
            ColorSpace::Srgb => "srgb",
            ColorSpace::Lab => "lab",
            ColorSpace::Opponent => "opponent",
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `H x W x C` raster, row-major with interleaved channels.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    colorspace: ColorSpace,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{}x{}, {})", self.height, self.width, self.channels, self.colorspace)
    }
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, colorspace: ColorSpace) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err(format!("empty image {height}x{width}")));
        }
        if !(1..=3).contains(&channels) {
            return Err(shape_err(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(shape_err(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data, colorspace })
    }

    pub fn filled(height: usize, width: usize, color: &[f64], colorspace: ColorSpace) -> Result<Self> {
        let data = color.iter().copied().cycle().take(height * width * color.len()).collect();
        Self::new(height, width, color.len(), data, colorspace)
    }

    /// Builds an image by evaluating `f(y, x)` for the pixel color.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        colorspace: ColorSpace,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                if px.len() != channels {
                    return Err(shape_err("pixel function returned the wrong channel count"));
                }
                data.extend_from_slice(&px);
            }
        }
        Self::new(height, width, channels, data, colorspace)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Same pixels, different tag. No conversion is applied.
    pub fn with_colorspace(mut self, colorspace: ColorSpace) -> Self {
        self.colorspace = colorspace;
        self
    }

    pub(crate) fn expect(&self, cs: ColorSpace) -> Result<()> {
        if self.colorspace != cs {
            return Err(Error::ColorSpace { expected: cs.name(), found: self.colorspace.name() });
        }
        Ok(())
    }

    pub(crate) fn expect_rgb(&self) -> Result<()> {
        if !matches!(self.colorspace, ColorSpace::Srgb | ColorSpace::LinearRgb) {
            return Err(Error::ColorSpace { expected: "rgb", found: self.colorspace.name() });
        }
        if self.channels != 3 {
            return Err(shape_err(format!("expected 3 channels, got {}", self.channels)));
        }
        Ok(())
    }

    pub fn mean_color(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            m.iter_mut().zip(px).for_each(|(a, b)| *a += b);
        }
        let n = (self.height * self.width) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// One channel as a single-channel image with the same tag.
    pub fn channel(&self, c: usize) -> Result<ImageBuffer> {
        if c >= self.channels {
            return Err(invalid(format!("channel {c} out of range")));
        }
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Self::new(self.height, self.width, 1, data, self.colorspace)
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (p, px) in self.data.chunks_exact(c).enumerate() {
            for (ci, v) in px.iter().enumerate() {
                out[ci * h * w + p] = *v;
            }
        }
        Tensor::new(vec![c, h, w], out).expect("shape matches by construction")
    }

    pub fn from_chw(t: &Tensor, colorspace: ColorSpace) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(shape_err(format!("expected [C, H, W], got {:?}", t.shape())));
        };
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                data[p * c + ci] = t.data()[ci * h * w + p];
            }
        }
        Self::new(h, w, c, data, colorspace)
    }

    /// Bilinear resize, half-pixel centers, border clamping.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<Self> {
        if new_h == 0 || new_w == 0 {
            return Err(invalid("resize target must be at least 1x1"));
        }
        let planes = resize_planes(self.to_chw().data(), self.channels, (self.height, self.width), (new_h, new_w));
        Self::from_chw(&Tensor::new(vec![self.channels, new_h, new_w], planes)?, self.colorspace)
    }

    /// Scales so the long side equals `long_side`, keeping the aspect ratio.
    pub fn resize_long_side(&self, long_side: usize) -> Result<Self> {
        let (h, w) = scaled_dims(self.height, self.width, long_side);
        self.resize_bilinear(h, w)
    }

    /// 2x box downsample; odd trailing rows/columns are clamped.
    pub fn downsample2(&self) -> Self {
        let planes = pool_planes(self.to_chw().data(), self.channels, (self.height, self.width));
        let t = Tensor::new(vec![self.channels, self.height.div_ceil(2), self.width.div_ceil(2)], planes)
            .expect("pool output shape");
        Self::from_chw(&t, self.colorspace).expect("pool output is nonempty")
    }

    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w, c) = (img.height, img.width, img.channels);
            let mut data = vec![0.0; img.data.len()];
            // new(y', x') = old(x', w - 1 - y'), new dims w x h
            for y2 in 0..w {
                for x2 in 0..h {
                    let src = (x2 * w + (w - 1 - y2)) * c;
                    let dst = (y2 * h + x2) * c;
                    data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
                }
            }
            img = ImageBuffer { height: w, width: h, channels: c, data, colorspace: img.colorspace };
        }
        img
    }

    pub fn clamp01(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Decodes an 8-bit PNG or JPEG into sRGB values in `[0, 1]`.
    /// Grayscale inputs are expanded to three channels.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Codec { path: path.to_path_buf(), source })?;
        Ok(Self::from_dynamic(img))
    }

    /// Decodes encoded image bytes (format sniffed from the content).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|source| Error::Codec { path: "<memory>".into(), source })?;
        Ok(Self::from_dynamic(img))
    }

    /// Decodes a single-channel mask; nonzero pixels are `1.0`.
    pub fn decode_mask(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|source| Error::Codec { path: "<memory>".into(), source })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| if v > 0 { 1.0 } else { 0.0 }).collect();
        Self::new(h as usize, w as usize, 1, data, ColorSpace::Srgb)
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        Self { height: h as usize, width: w as usize, channels: 3, data, colorspace: ColorSpace::Srgb }
    }

    fn to_bytes8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    fn color_type(&self) -> Result<image::ExtendedColorType> {
        match self.channels {
            1 => Ok(image::ExtendedColorType::L8),
            3 => Ok(image::ExtendedColorType::Rgb8),
            c => Err(invalid(format!("cannot encode a {c}-channel image"))),
        }
    }

    /// Encodes as 8-bit PNG. Values are clamped to `[0, 1]` and rounded.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(Cursor::new(&mut buf))
            .write_image(&self.to_bytes8(), self.width as u32, self.height as u32, self.color_type()?)
            .map_err(|source| Error::Codec { path: "<memory>".into(), source })?;
        Ok(buf)
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(path, &self.to_bytes8(), self.width as u32, self.height as u32, self.color_type()?)
            .map_err(|source| Error::Codec { path: path.to_path_buf(), source })
    }
}

/// Dimensions with the long side set to `long_side`, rounding the short side.
pub fn scaled_dims(h: usize, w: usize, long_side: usize) -> (usize, usize) {
    let s = long_side as f64 / h.max(w) as f64;
    let r = |v: usize| ((v as f64 * s).round() as usize).max(1);
    if h >= w {
        (long_side, r(w))
    } else {
        (r(h), long_side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut s = seed;
        let data = (0..h * w * c)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        ImageBuffer::new(h, w, c, data, ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn constant_upsample_stays_constant() {
        let img = ImageBuffer::filled(4, 4, &[0.5], ColorSpace::Srgb).unwrap();
        let up = img.resize_bilinear(8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = noise(2, 2, 3, 1);
        assert_eq!(img.resize_bilinear(2, 2).unwrap(), img);
    }

    #[test]
    fn column_upsample_golden() {
        let img = ImageBuffer::new(2, 1, 1, vec![0.0, 1.0], ColorSpace::Srgb).unwrap();
        assert_eq!(img.resize_bilinear(4, 1).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(noise(3, 3, 1, 2).resize_bilinear(0, 3).is_err());
        assert!(ImageBuffer::new(0, 3, 1, vec![], ColorSpace::Srgb).is_err());
    }

    #[test]
    fn dyadic_resizes_keep_the_mean() {
        let img = noise(16, 12, 3, 3);
        for (h, w) in [(32, 24), (8, 6)] {
            let r = img.resize_bilinear(h, w).unwrap();
            for (a, b) in r.mean_color().iter().zip(img.mean_color()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn four_rotations_round_trip() {
        let img = noise(3, 5, 3, 4);
        let r = img.rotate90(1);
        assert_eq!((r.height(), r.width()), (5, 3));
        // top-right pixel moves to top-left
        assert_eq!(r.pixel(0, 0), img.pixel(0, 4));
        assert_eq!(img.rotate90(4), img);
        assert_eq!(r.rotate90(3), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = ImageBuffer::new(4, 3, 3, data, ColorSpace::Srgb).unwrap();
        let back = ImageBuffer::decode(&img.encode_png().unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        img.save(&p).unwrap();
        assert_eq!(ImageBuffer::load(&p).unwrap(), back);
    }

    #[test]
    fn chw_round_trip() {
        let img = noise(3, 4, 2, 5);
        assert_eq!(ImageBuffer::from_chw(&img.to_chw(), ColorSpace::Srgb).unwrap(), img);
    }

    #[test]
    fn long_side_dims() {
        assert_eq!(scaled_dims(100, 200, 64), (32, 64));
        assert_eq!(scaled_dims(300, 100, 64), (64, 21));
    }
}
