//! Colorspace conversions: sRGB, CIE-Lab (D65) and the opponent basis.

use nalgebra::{Matrix3, Vector3};

use crate::error::{shape_err, Result};
use crate::image::{ColorSpace, ImageBuffer};

const S3: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const S6: f64 = 0.408_248_290_463_863; // 1/sqrt(6)

/// Rows are the opponent axes: achromatic, red-green, yellow-blue.
pub const OPPONENT: [[f64; 3]; 3] = [[S3, S3, S3], [S2, -S2, 0.0], [S6, S6, -2.0 * S6]];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn to_xyz() -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| RGB_TO_XYZ[r][c])
}

/// Reference white: the image of linear (1, 1, 1), so white maps to a = b = 0.
fn white() -> Vector3<f64> {
    to_xyz() * Vector3::new(1.0, 1.0, 1.0)
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_finv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

struct LabCoder {
    m: Matrix3<f64>,
    minv: Matrix3<f64>,
    white: Vector3<f64>,
}

impl LabCoder {
    fn new() -> Self {
        let m = to_xyz();
        let minv = m.try_inverse().expect("sRGB primaries are independent");
        Self { m, minv, white: white() }
    }

    fn encode(&self, lin: [f64; 3]) -> [f64; 3] {
        let xyz = (self.m * Vector3::from(lin)).component_div(&self.white);
        let (fx, fy, fz) = (lab_f(xyz.x), lab_f(xyz.y), lab_f(xyz.z));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    fn decode(&self, lab: [f64; 3]) -> [f64; 3] {
        let fy = (lab[0] + 16.0) / 116.0;
        let fx = fy + lab[1] / 500.0;
        let fz = fy - lab[2] / 200.0;
        let xyz = Vector3::new(lab_finv(fx), lab_finv(fy), lab_finv(fz)).component_mul(&self.white);
        (self.minv * xyz).into()
    }
}

/// sRGB or linear RGB to CIE-Lab under D65.
pub fn rgb_to_lab(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.expect_rgb()?;
    let gamma = img.colorspace() == ColorSpace::Srgb;
    let coder = LabCoder::new();
    let mut out = img.clone().with_colorspace(ColorSpace::Lab);
    for px in out.data_mut().chunks_exact_mut(3) {
        let lin = if gamma {
            [srgb_to_linear(px[0]), srgb_to_linear(px[1]), srgb_to_linear(px[2])]
        } else {
            [px[0], px[1], px[2]]
        };
        px.copy_from_slice(&coder.encode(lin));
    }
    Ok(out)
}

/// CIE-Lab back to sRGB. Out-of-gamut values are not clamped.
pub fn lab_to_rgb(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.expect(ColorSpace::Lab)?;
    if img.channels() != 3 {
        return Err(shape_err("Lab image must have 3 channels"));
    }
    let coder = LabCoder::new();
    let mut out = img.clone().with_colorspace(ColorSpace::Srgb);
    for px in out.data_mut().chunks_exact_mut(3) {
        let lin = coder.decode([px[0], px[1], px[2]]);
        for (d, v) in px.iter_mut().zip(lin) {
            *d = linear_to_srgb(v);
        }
    }
    Ok(out)
}

fn apply3(img: &ImageBuffer, m: &[[f64; 3]; 3], cs: ColorSpace) -> ImageBuffer {
    let mut out = img.clone().with_colorspace(cs);
    for px in out.data_mut().chunks_exact_mut(3) {
        let v = [px[0], px[1], px[2]];
        for (r, row) in m.iter().enumerate() {
            px[r] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    out
}

/// Orthonormal decorrelated basis with the mean color as channel 0.
pub fn to_opponent_space(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.expect_rgb()?;
    Ok(apply3(img, &OPPONENT, ColorSpace::Opponent))
}

/// Inverse of [`to_opponent_space`]; yields sRGB-tagged values.
pub fn from_opponent_space(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.expect(ColorSpace::Opponent)?;
    let mut t = [[0.0; 3]; 3];
    for (r, row) in OPPONENT.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            t[c][r] = *v;
        }
    }
    Ok(apply3(img, &t, ColorSpace::Srgb))
}
