//! Hypercolumn features from a fixed, seeded convolutional bank.
//!
//! The bank is a stack of bias-free 3x3 convolutions with leaky-relu
//! activations and 2x average pooling between blocks. Weights are drawn
//! from a seeded normal distribution with fan-in scaling, then each layer is
//! rescaled once so its activations have unit RMS on a fixed procedural
//! calibration image. Every included layer is bilinearly resized to a
//! quarter-resolution grid and the layers are concatenated per cell.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{ColorSpace, ImageBuffer};

/// Channel means subtracted before the first convolution.
pub const DEFAULT_INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];

/// Smallest image side accepted by [`FilterBank::extract_hypercolumns`].
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterBankSpec {
    pub seed: u64,
    /// `(layer count, channel width)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub leaky_slope: f64,
    /// Global layer ids (counted across blocks) that feed the hypercolumns.
    pub included_layers: Vec<usize>,
    /// Per-channel value subtracted from the RGB input. Without it, exactly
    /// black regions would produce all-zero features in a bias-free bank.
    pub input_mean: [f64; 3],
}

impl Default for FilterBankSpec {
    fn default() -> Self {
        Self {
            seed: 1337,
            blocks: vec![(2, 16), (2, 32), (2, 64), (2, 128)],
            leaky_slope: 0.2,
            included_layers: (0..8).collect(),
            input_mean: DEFAULT_INPUT_MEAN,
        }
    }
}

impl FilterBankSpec {
    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.0).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(invalid("filter bank blocks need at least one layer of nonzero width"));
        }
        let n = self.layer_count();
        if self.included_layers.is_empty() {
            return Err(invalid("no layers included"));
        }
        let mut seen = vec![false; n];
        for &l in &self.included_layers {
            if l >= n || std::mem::replace(&mut seen[l], true) {
                return Err(invalid(format!("bad or repeated included layer {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    block: usize,
    weights: Tensor,
}

/// A calibrated, immutable feature extractor.
#[derive(Clone, Debug)]
pub struct FilterBank {
    spec: FilterBankSpec,
    layers: Vec<Layer>,
    /// Included layer ids in ascending order.
    included: Vec<usize>,
}

/// Quarter-resolution grid used for an `h x w` image.
pub fn grid_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(4), w.div_ceil(4))
}

fn calibration_image(seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ca_11b8_a7e0);
    let waves: Vec<[f64; 4]> = (0..12)
        .map(|_| [rng.random_range(0.5..6.0), rng.random_range(0.5..6.0), rng.random_range(0.0..6.3), rng.random()])
        .collect();
    let n = 64;
    ImageBuffer::from_fn(n, n, 3, ColorSpace::Srgb, |y, x| {
        (0..3)
            .map(|c| {
                let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                let s: f64 = waves[c * 4..c * 4 + 4]
                    .iter()
                    .map(|w| w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).sin())
                    .sum();
                (0.5 + 0.25 * s).clamp(0.0, 1.0)
            })
            .collect()
    })
    .expect("calibration image dims are valid")
}

impl FilterBank {
    pub fn new(spec: FilterBankSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.layer_count());
        let mut cin = 3;
        for (b, &(n, width)) in spec.blocks.iter().enumerate() {
            for _ in 0..n {
                let fan_in = (cin * 9) as f64;
                let std = (2.0 / fan_in).sqrt();
                let data = (0..width * cin * 9).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                layers.push(Layer { block: b, weights: Tensor::new(vec![width, cin, 3, 3], data)? });
                cin = width;
            }
        }
        let mut included = spec.included_layers.clone();
        included.sort_unstable();
        let mut bank = Self { spec, layers, included };
        bank.calibrate()?;
        Ok(bank)
    }

    /// Rescales each layer in order so it has unit RMS on the calibration
    /// image. Leaky relu is positively homogeneous, so later layers see the
    /// already-normalized inputs.
    fn calibrate(&mut self) -> Result<()> {
        let img = calibration_image(self.spec.seed).to_chw();
        for l in 0..self.layers.len() {
            let tape = Tape::new();
            let x = tape.constant(img.clone());
            let acts = self.activations_upto(x, l)?;
            let a = acts[l].value();
            let rms = (a.data().iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
            if !(rms > 1e-12) {
                return Err(Error::Degenerate(format!("layer {l} is silent on the calibration image")));
            }
            self.layers[l].weights.data_mut().iter_mut().for_each(|w| *w /= rms);
        }
        Ok(())
    }

    pub fn spec(&self) -> &FilterBankSpec {
        &self.spec
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.included.iter().map(|&l| self.layers[l].weights.shape()[0]).sum()
    }

    /// Channel ranges of each included layer inside a feature vector.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.included
            .iter()
            .map(|&l| {
                let w = self.layers[l].weights.shape()[0];
                start += w;
                start - w..start
            })
            .collect()
    }

    /// First global layer id of every block.
    pub fn block_starts(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut id = 0;
        for &(n, _) in &self.spec.blocks {
            out.push(id);
            id += n;
        }
        out
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Raw activations `[C_l, h_l, w_l]` of layers `0..=last` for an
    /// RGB input `[3, H, W]`.
    pub fn activations_upto<'t>(&self, img: Var<'t>, last: usize) -> Result<Vec<Var<'t>>> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err(format!("feature bank expects [3, H, W], got {s:?}")));
        }
        let mean = img.tape().constant(Tensor::new(vec![3, 1, 1], self.spec.input_mean.to_vec())?);
        let mut x = img.sub(mean)?;
        let mut out = Vec::with_capacity(last + 1);
        for (i, layer) in self.layers[..=last.min(self.layers.len() - 1)].iter().enumerate() {
            if i > 0 && layer.block != self.layers[i - 1].block {
                x = x.avg_pool2()?;
            }
            let w = img.tape().constant(layer.weights.clone());
            x = x.conv2d(w, 1, 1)?.leaky_relu(self.spec.leaky_slope);
            out.push(x);
        }
        Ok(out)
    }

    /// Differentiable hypercolumns `[P, D]` (row-major cells, channels
    /// fastest) on the [`grid_dims`] grid.
    pub fn forward<'t>(&self, img: Var<'t>) -> Result<Var<'t>> {
        let s = img.shape();
        let last = *self.included.last().expect("validated nonempty");
        let acts = self.activations_upto(img, last)?;
        let (gh, gw) = grid_dims(s[1], s[2]);
        let parts = self
            .included
            .iter()
            .map(|&l| acts[l].resize_bilinear(gh, gw))
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim();
        Var::concat(&parts, 0)?.reshape(&[d, gh * gw])?.transpose()
    }

    fn check_image(img: &ImageBuffer) -> Result<()> {
        if img.channels() != 3 {
            return Err(shape_err("feature extraction needs an RGB image"));
        }
        if img.height().min(img.width()) < MIN_SIDE {
            return Err(invalid(format!(
                "image {}x{} is below the {MIN_SIDE}px minimum side",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn extract_hypercolumns(&self, img: &ImageBuffer) -> Result<FeatureTensor> {
        Self::check_image(img)?;
        let tape = Tape::new();
        let f = self.forward(tape.constant(img.to_chw()))?;
        let (gh, gw) = grid_dims(img.height(), img.width());
        FeatureTensor::new(gh, gw, self.dim(), f.value().data().to_vec())
    }

    /// Features of the image rotated by 0, 90, 180 and 270 degrees.
    pub fn extract_with_rotations(&self, img: &ImageBuffer) -> Result<Vec<FeatureTensor>> {
        Self::check_image(img)?;
        (0..4).map(|k| self.extract_hypercolumns(&img.rotate90(k))).collect()
    }
}

/// Dense `gh x gw x D` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    gh: usize,
    gw: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(gh: usize, gw: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if gh == 0 || gw == 0 || dim == 0 {
            return Err(shape_err(format!("feature grid {gh}x{gw}x{dim} is empty")));
        }
        if data.len() != gh * gw * dim {
            return Err(shape_err(format!("feature grid {gh}x{gw}x{dim} got {} values", data.len())));
        }
        Ok(Self { gh, gw, dim, data })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.gh, self.gw)
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.gw + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// `[P, D]` tensor view (copied).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.cells(), self.dim], self.data.clone()).expect("consistent dims")
    }

    pub fn sample(&self, coords: &[(usize, usize)]) -> Result<FeatureSample> {
        let mut vectors = Vec::with_capacity(coords.len() * self.dim);
        for &(r, c) in coords {
            if r >= self.gh || c >= self.gw {
                return Err(invalid(format!("coordinate ({r}, {c}) outside {}x{} grid", self.gh, self.gw)));
            }
            vectors.extend_from_slice(self.cell(r, c));
        }
        FeatureSample::new(coords.to_vec(), Tensor::new(vec![coords.len(), self.dim], vectors)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"FEAT1")?;
        for d in [self.gh, self.gw, self.dim] {
            let d = u32::try_from(d).map_err(|_| invalid("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses the `FEAT1` layout: magic, three little-endian `u32` dims
    /// `(gh, gw, D)`, then `gh * gw * D` little-endian `f32` values.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: String| Error::FeatureFormat(m);
        if bytes.len() < 17 {
            return Err(bad(format!("file has {} bytes, header needs 17", bytes.len())));
        }
        if &bytes[..5] != b"FEAT1" {
            return Err(bad("bad magic".into()));
        }
        let dim_at = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (gh, gw, d) = (dim_at(0), dim_at(1), dim_at(2));
        if gh == 0 || gw == 0 || d == 0 {
            return Err(bad(format!("zero dimension in header {gh}x{gw}x{d}")));
        }
        let n = gh.checked_mul(gw).and_then(|v| v.checked_mul(d)).ok_or_else(|| bad("header dims overflow".into()))?;
        let body = &bytes[17..];
        if body.len() != n * 4 {
            return Err(bad(format!("expected {} payload bytes, found {}", n * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        Self::new(gh, gw, d, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Loads an externally computed feature grid.
pub fn load_external_features(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    FeatureTensor::load(path)
}

/// A sparse set of feature vectors with their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    coords: Vec<(usize, usize)>,
    vectors: Tensor,
}

impl FeatureSample {
    pub fn new(coords: Vec<(usize, usize)>, vectors: Tensor) -> Result<Self> {
        if coords.is_empty() || vectors.shape().len() != 2 || vectors.shape()[0] != coords.len() {
            return Err(shape_err(format!(
                "{} coordinates with vectors of shape {:?}",
                coords.len(),
                vectors.shape()
            )));
        }
        Ok(Self { coords, vectors })
    }

    /// Builds a sample from row vectors, using `(i, 0)` as coordinates.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape_err("ragged feature rows"));
        }
        let coords = (0..rows.len()).map(|i| (i, 0)).collect();
        Self::new(coords, Tensor::new(vec![rows.len(), d], rows.concat())?)
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SampleMode {
    RandomUniform,
    JitteredGrid,
}

/// Draws `n` distinct cells of a `gh x gw` grid.
///
/// `JitteredGrid` lays a near-square `r x c` lattice (`r * c >= n`) with
/// integer strides and one shared random offset, then drops a random subset
/// of the surplus points.
pub fn sample_coords(gh: usize, gw: usize, n: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let cells = gh * gw;
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    if n > cells {
        return Err(invalid(format!("cannot draw {n} samples from {cells} cells")));
    }
    match mode {
        SampleMode::RandomUniform => {
            Ok(index::sample(rng, cells, n).into_iter().map(|i| (i / gw, i % gw)).collect())
        }
        SampleMode::JitteredGrid => {
            let mut r = ((n as f64 * gh as f64 / gw as f64).sqrt().round() as usize).clamp(1, gh);
            let mut c = n.div_ceil(r);
            if c > gw {
                c = gw;
                r = n.div_ceil(c);
            }
            let (sy, sx) = (gh / r, gw / c);
            let oy = rng.random_range(0..sy);
            let ox = rng.random_range(0..sx);
            let mut pts: Vec<(usize, usize)> =
                (0..r).flat_map(|i| (0..c).map(move |j| (oy + i * sy, ox + j * sx))).collect();
            if pts.len() > n {
                let mut keep = index::sample(rng, pts.len(), n).into_vec();
                keep.sort_unstable();
                pts = keep.into_iter().map(|k| pts[k]).collect();
            }
            Ok(pts)
        }
    }
}

pub fn sample_features(t: &FeatureTensor, n: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<FeatureSample> {
    let coords = sample_coords(t.gh, t.gw, n, mode, rng)?;
    t.sample(&coords)
}

/// Flat row indices of grid coordinates.
pub fn flat_indices(coords: &[(usize, usize)], gw: usize) -> Vec<usize> {
    coords.iter().map(|&(r, c)| r * gw + c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_coords, objective};
    use std::collections::HashSet;

    fn noise(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random()).collect();
        ImageBuffer::new(h, w, 3, data, ColorSpace::Srgb).unwrap()
    }

    fn small_spec() -> FilterBankSpec {
        FilterBankSpec { blocks: vec![(1, 4), (1, 6)], included_layers: vec![0, 1], ..Default::default() }
    }

    #[test]
    fn default_shape() {
        let bank = FilterBank::new(FilterBankSpec::default()).unwrap();
        let f = bank.extract_hypercolumns(&noise(64, 64, 1)).unwrap();
        assert_eq!(f.grid(), (16, 16));
        assert_eq!(f.dim(), 480);
        assert_eq!(bank.layer_ranges().len(), 8);
        assert_eq!(bank.layer_ranges()[7], 352..480);
    }

    #[test]
    fn deterministic_across_instances() {
        let img = noise(40, 36, 2);
        let a = FilterBank::new(FilterBankSpec::default()).unwrap().extract_hypercolumns(&img).unwrap();
        let b = FilterBank::new(FilterBankSpec::default()).unwrap().extract_hypercolumns(&img).unwrap();
        assert_eq!(a, b);
        let other = FilterBank::new(FilterBankSpec { seed: 7, ..Default::default() }).unwrap();
        assert_ne!(other.extract_hypercolumns(&img).unwrap(), a);
    }

    #[test]
    fn zero_image_without_centering_gives_zero_features() {
        let bank = FilterBank::new(FilterBankSpec { input_mean: [0.0; 3], ..Default::default() }).unwrap();
        let img = ImageBuffer::filled(32, 32, &[0.0; 3], ColorSpace::Srgb).unwrap();
        let f = bank.extract_hypercolumns(&img).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibrated_layers_have_unit_rms() {
        let bank = FilterBank::new(FilterBankSpec::default()).unwrap();
        let tape = Tape::new();
        let img = tape.constant(calibration_image(bank.spec().seed).to_chw());
        for a in bank.activations_upto(img, 7).unwrap() {
            let v = a.value();
            let rms = (v.data().iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-9, "{rms}");
        }
    }

    #[test]
    fn small_images_rejected() {
        let bank = FilterBank::new(small_spec()).unwrap();
        assert!(bank.extract_hypercolumns(&noise(31, 64, 3)).is_err());
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(FilterBank::new(FilterBankSpec { included_layers: vec![8], ..Default::default() }).is_err());
        assert!(FilterBank::new(FilterBankSpec { included_layers: vec![1, 1], ..Default::default() }).is_err());
        assert!(FilterBank::new(FilterBankSpec { blocks: vec![], ..Default::default() }).is_err());
    }

    #[test]
    fn rotations() {
        let bank = FilterBank::new(small_spec()).unwrap();
        let c = ImageBuffer::filled(32, 32, &[0.3, 0.5, 0.9], ColorSpace::Srgb).unwrap();
        let rc = bank.extract_with_rotations(&c).unwrap();
        assert!(rc.iter().all(|t| *t == rc[0]));
        let img = noise(36, 44, 4);
        let r = bank.extract_with_rotations(&img).unwrap();
        assert_eq!(r[0], bank.extract_hypercolumns(&img).unwrap());
        assert_eq!(r[1].grid(), (11, 9));
        let shifted = bank.extract_with_rotations(&img.rotate90(1)).unwrap();
        for k in 0..4 {
            assert_eq!(shifted[k], r[(k + 1) % 4]);
        }
    }

    #[test]
    fn hypercolumn_gradients() {
        let bank = FilterBank::new(FilterBankSpec::default()).unwrap();
        let img = noise(16, 16, 5).to_chw();
        let target = {
            let tape = Tape::new();
            bank.forward(tape.constant(noise(16, 16, 6).to_chw())).unwrap().value().as_ref().clone()
        };
        let f = objective(|tape, x| {
            let t = tape.constant(target.clone());
            bank.forward(x)?.sub(t)?.square().mean().sqrt()
        });
        let coords: Vec<usize> = (0..img.len()).step_by(7).collect();
        let err = finite_diff_check_coords(f, &img, 1e-6, &coords).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| f64::from(i as f32 * 0.25 - 1.0)).collect();
        let t = FeatureTensor::new(2, 3, 4, vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.feat");
        t.save(&p).unwrap();
        assert_eq!(load_external_features(&p).unwrap(), t);

        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        assert!(matches!(FeatureTensor::read_from(&bytes[..bytes.len() - 1]), Err(Error::FeatureFormat(_))));
        assert!(matches!(FeatureTensor::read_from(&bytes[..10]), Err(Error::FeatureFormat(_))));
        let mut zero = bytes.clone();
        zero[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(FeatureTensor::read_from(&zero[..]), Err(Error::FeatureFormat(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(FeatureTensor::read_from(&magic[..]), Err(Error::FeatureFormat(_))));
    }

    #[test]
    fn full_sampling_hits_every_cell_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [SampleMode::RandomUniform, SampleMode::JitteredGrid] {
            for (gh, gw) in [(5, 7), (8, 8), (1, 9)] {
                let pts = sample_coords(gh, gw, gh * gw, mode, &mut rng).unwrap();
                let set: HashSet<_> = pts.iter().copied().collect();
                assert_eq!(set.len(), gh * gw);
            }
        }
    }

    #[test]
    fn jittered_grid_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts = sample_coords(32, 32, 16, SampleMode::JitteredGrid, &mut rng).unwrap();
            assert_eq!(pts.len(), 16);
            let (oy, ox) = pts[0];
            assert!(oy < 8 && ox < 8);
            for (k, &(r, c)) in pts.iter().enumerate() {
                assert_eq!((r, c), (oy + 8 * (k / 4), ox + 8 * (k % 4)));
            }
        }
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [SampleMode::RandomUniform, SampleMode::JitteredGrid] {
            for n in [1, 10, 37, 99] {
                let pts = sample_coords(10, 13, n, mode, &mut rng).unwrap();
                assert_eq!(pts.len(), n);
                assert_eq!(pts.iter().collect::<HashSet<_>>().len(), n);
                assert!(pts.iter().all(|&(r, c)| r < 10 && c < 13));
            }
        }
        assert!(sample_coords(4, 4, 17, SampleMode::RandomUniform, &mut rng).is_err());
    }
}
