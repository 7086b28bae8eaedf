//! Laplacian pyramids: band-pass levels over a low-pass residual.
//!
//! Level `i` has size `ceil(H / 2^i) x ceil(W / 2^i)`. Bands are
//! `x - up(down(x))` with a 2x box downsample and bilinear upsample, so
//! collapsing is exact up to rounding.

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    levels: Vec<ImageBuffer>,
}

/// Largest level count allowed for an `h x w` image.
pub fn max_levels(h: usize, w: usize) -> usize {
    let m = h.min(w).max(1);
    (usize::BITS - m.leading_zeros()) as usize
}

fn level_dims(h: usize, w: usize, i: usize) -> (usize, usize) {
    (h.div_ceil(1 << i), w.div_ceil(1 << i))
}

impl LaplacianPyramid {
    pub fn build(img: &ImageBuffer, n_levels: usize) -> Result<Self> {
        if n_levels == 0 {
            return Err(invalid("a pyramid needs at least one level"));
        }
        if n_levels > max_levels(img.height(), img.width()) {
            return Err(invalid(format!(
                "{n_levels} levels need min side >= {}, image is {}x{}",
                1usize << (n_levels - 1),
                img.height(),
                img.width()
            )));
        }
        let mut levels = Vec::with_capacity(n_levels);
        let mut cur = img.clone();
        for _ in 1..n_levels {
            let down = cur.downsample2();
            let up = down.resize_bilinear(cur.height(), cur.width())?;
            let mut band = cur;
            band.data_mut().iter_mut().zip(up.data()).for_each(|(b, u)| *b -= u);
            levels.push(band);
            cur = down;
        }
        levels.push(cur);
        Ok(Self { levels })
    }

    /// Wraps explicit levels, checking the size chain.
    pub fn from_levels(levels: Vec<ImageBuffer>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| invalid("empty pyramid"))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        for (i, l) in levels.iter().enumerate() {
            if (l.height(), l.width()) != level_dims(h, w, i) || l.channels() != c {
                return Err(shape_err(format!(
                    "level {i} is {}x{}x{}, expected {:?}x{c}",
                    l.height(),
                    l.width(),
                    l.channels(),
                    level_dims(h, w, i)
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[ImageBuffer] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<ImageBuffer> {
        self.levels
    }

    pub fn collapse(&self) -> Result<ImageBuffer> {
        let mut it = self.levels.iter().rev();
        let mut acc = it.next().expect("nonempty by construction").clone();
        for band in it {
            let mut up = acc.resize_bilinear(band.height(), band.width())?;
            up.data_mut().iter_mut().zip(band.data()).for_each(|(u, b)| *u += b);
            acc = up.with_colorspace(band.colorspace());
        }
        Ok(acc)
    }
}

/// Differentiable collapse of `[C, h_i, w_i]` level variables, finest first.
pub fn collapse_vars<'t>(levels: &[Var<'t>]) -> Result<Var<'t>> {
    let (last, rest) = levels.split_last().ok_or_else(|| invalid("empty pyramid"))?;
    let mut acc = *last;
    for band in rest.iter().rev() {
        let s = band.shape();
        acc = acc.resize_bilinear(s[1], s[2])?.add(*band)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::image::ColorSpace;
    use rand::{Rng, SeedableRng};

    fn random(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random()).collect();
        ImageBuffer::new(h, w, 3, data, ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn constant_image_has_zero_bands() {
        let img = ImageBuffer::filled(9, 7, &[0.2, 0.4, 0.6], ColorSpace::Srgb).unwrap();
        let p = LaplacianPyramid::build(&img, 3).unwrap();
        for band in &p.levels()[..2] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
        assert!(p.levels()[2].data().chunks(3).all(|px| px == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn single_level_is_the_image() {
        let img = random(5, 6, 1);
        assert_eq!(LaplacianPyramid::build(&img, 1).unwrap().levels(), &[img]);
    }

    #[test]
    fn round_trip() {
        for (h, w, n) in [(8, 8, 3), (13, 9, 4), (64, 48, 5)] {
            let img = random(h, w, h as u64);
            let p = LaplacianPyramid::build(&img, n).unwrap();
            assert_eq!(p.levels().len(), n);
            assert_eq!((p.levels()[n - 1].height(), p.levels()[n - 1].width()), level_dims(h, w, n - 1));
            let back = p.collapse().unwrap();
            let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn too_many_levels() {
        assert!(LaplacianPyramid::build(&random(4, 9, 0), 4).is_err());
        assert!(LaplacianPyramid::build(&random(4, 9, 0), 3).is_ok());
        assert_eq!(max_levels(64, 100), 7);
    }

    #[test]
    fn zero_pyramid_collapses_to_zero() {
        let levels = (0..3)
            .map(|i| {
                let (h, w) = level_dims(10, 6, i);
                ImageBuffer::filled(h, w, &[0.0; 3], ColorSpace::Srgb).unwrap()
            })
            .collect();
        let img = LaplacianPyramid::from_levels(levels).unwrap().collapse().unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_levels_rejected() {
        let a = ImageBuffer::filled(8, 8, &[0.0], ColorSpace::Srgb).unwrap();
        let b = ImageBuffer::filled(3, 4, &[0.0], ColorSpace::Srgb).unwrap();
        assert!(LaplacianPyramid::from_levels(vec![a, b]).is_err());
    }

    #[test]
    fn tape_collapse_matches_plain_collapse() {
        let img = random(11, 14, 3);
        let p = LaplacianPyramid::build(&img, 3).unwrap();
        let tape = Tape::new();
        let vars: Vec<_> = p.levels().iter().map(|l| tape.leaf(l.to_chw())).collect();
        let out = collapse_vars(&vars).unwrap();
        assert_eq!(*out.value(), p.collapse().unwrap().to_chw());
    }
}
