//! Compares the relaxed EMD against the exact EMD on hypercolumn samples.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylecore::features::{grid_dims, sample_features, FeatureTensor, FilterBank, FilterBankSpec, SampleMode};
use stylecore::transport::{cosine_distance_matrix, exact_emd, remd};
use stylecore::{ImageBuffer, Result};

/// Images used when no directory is given.
const BUILTIN: [(&str, &[u8]); 6] = [
    ("astronaut", include_bytes!("../../core/tests/data/astronaut.png")),
    ("chelsea", include_bytes!("../../core/tests/data/chelsea.png")),
    ("coffee", include_bytes!("../../core/tests/data/coffee.png")),
    ("rocket", include_bytes!("../../core/tests/data/rocket.png")),
    ("grass", include_bytes!("../../core/tests/data/grass.png")),
    ("brick", include_bytes!("../../core/tests/data/brick.png")),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub remd: f64,
    pub emd: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct EmdReport {
    pub trials: Vec<Trial>,
    pub mean: f64,
    pub std: f64,
}

pub fn builtin_images() -> Result<Vec<ImageBuffer>> {
    BUILTIN.iter().map(|(_, bytes)| ImageBuffer::decode(bytes)).collect()
}

/// Every decodable image in `dir`, sorted by file name.
pub fn images_in(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths.iter().map(ImageBuffer::load).collect()
}

/// Hypercolumns of `img`, upsampled first if its grid has fewer than `n` cells.
fn features_with_cells(bank: &FilterBank, img: &ImageBuffer, n: usize) -> Result<FeatureTensor> {
    let (gh, gw) = grid_dims(img.height(), img.width());
    if gh * gw >= n {
        return bank.extract_hypercolumns(img);
    }
    let grow = (n as f64 / (gh * gw) as f64).sqrt() * 1.05;
    let long = (img.height().max(img.width()) as f64 * grow).ceil() as usize + 4;
    bank.extract_hypercolumns(&img.resize_long_side(long)?)
}

/// Runs `trials` comparisons of `n` sampled cells from two random images.
pub fn run(images: &[ImageBuffer], n: usize, trials: usize, seed: u64) -> Result<EmdReport> {
    if images.is_empty() {
        return Err(stylecore::Error::InvalidArgument("no images to sample from".into()));
    }
    let bank = FilterBank::new(FilterBankSpec::default())?;
    let feats = images.iter().map(|img| features_with_cells(&bank, img, n)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let i = rng.random_range(0..feats.len());
        let j = rng.random_range(0..feats.len());
        let a = sample_features(&feats[i], n, SampleMode::RandomUniform, &mut rng)?;
        let b = sample_features(&feats[j], n, SampleMode::RandomUniform, &mut rng)?;
        let c = cosine_distance_matrix(&a, &b, false)?;
        let (r, e) = (remd(&c)?, exact_emd(&c)?.cost);
        out.push(Trial { remd: r, emd: e, ratio: if e > 0.0 { r / e } else { 1.0 } });
    }
    let k = out.len().max(1) as f64;
    let mean = out.iter().map(|t| t.ratio).sum::<f64>() / k;
    let std = (out.iter().map(|t| (t.ratio - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(EmdReport { trials: out, mean, std })
}

impl EmdReport {
    /// `trial,remd,emd,ratio` rows followed by `mean` and `std` rows.
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["trial", "remd", "emd", "ratio"])?;
        for (k, t) in self.trials.iter().enumerate() {
            csv.write_record([k.to_string(), t.remd.to_string(), t.emd.to_string(), t.ratio.to_string()])?;
        }
        csv.write_record(["mean", "", "", &self.mean.to_string()])?;
        csv.write_record(["std", "", "", &self.std.to_string()])?;
        csv.flush()?;
        Ok(())
    }
}
