//! Guidance documents: user region pairs and point pairs in pixel space,
//! and their JSON exchange format.
//!
//! ```json
//! {
//!   "regions": [{"content_mask": "sky_c.png", "style_mask": "sky_s.png"}],
//!   "points": [{"content": [120, 40], "style": [300, 88]}],
//!   "beta": 5.0,
//!   "spacing": 20.0
//! }
//! ```
//!
//! Masks are grayscale images; nonzero pixels are inside the region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::transport::{expand_point_guidance, GridGuidance, PointPair};

pub const DEFAULT_BETA: f64 = 5.0;
/// Point-lattice spacing for a 512 px output; scaled with the content size.
pub const DEFAULT_SPACING_AT_512: f64 = 20.0;

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(crate::error::shape_err(format!("{height}x{width} mask with {} entries", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Nonzero pixels of the first channel are inside.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let c = img.channels();
        let data = img.data().chunks_exact(c).map(|p| p[0] != 0.0).collect();
        Self { height: img.height(), width: img.width(), data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair {
    pub content: Mask,
    pub style: Mask,
}

/// Resolved guidance for one content/style pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub regions: Vec<RegionPair>,
    pub points: Vec<PointPair>,
    pub beta: f64,
    /// Lattice spacing in content pixels; `None` scales the default with
    /// the content size.
    pub spacing: Option<f64>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self { regions: Vec::new(), points: Vec::new(), beta: DEFAULT_BETA, spacing: None }
    }
}

fn doc_err(message: String) -> Error {
    Error::Document { kind: "guidance", message }
}

impl GuidanceSpec {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty() && self.points.is_empty()
    }

    /// Checks every field against the full-resolution image dimensions
    /// `(height, width)`.
    pub fn validate(&self, content_dims: (usize, usize), style_dims: (usize, usize)) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(doc_err(format!("beta: must be positive, got {}", self.beta)));
        }
        if let Some(s) = self.spacing {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(doc_err(format!("spacing: must be nonnegative, got {s}")));
            }
        }
        for (k, r) in self.regions.iter().enumerate() {
            for (field, m, dims, what) in
                [("content_mask", &r.content, content_dims, "content"), ("style_mask", &r.style, style_dims, "style")]
            {
                if m.dims() != dims {
                    return Err(doc_err(format!(
                        "regions[{k}].{field}: mask is {}x{}, {what} image is {}x{}",
                        m.height, m.width, dims.0, dims.1
                    )));
                }
                if m.count() == 0 {
                    return Err(doc_err(format!("regions[{k}].{field}: mask is empty")));
                }
            }
        }
        for (k, p) in self.points.iter().enumerate() {
            for (field, xy, (h, w)) in [("content", p.content, content_dims), ("style", p.style, style_dims)] {
                let inside = xy[0] >= 0.0 && xy[1] >= 0.0 && xy[0] <= (w - 1) as f64 && xy[1] <= (h - 1) as f64;
                if !inside {
                    return Err(doc_err(format!(
                        "points[{k}].{field}: ({}, {}) is outside the {w}x{h} image",
                        xy[0], xy[1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn effective_spacing(&self, content_dims: (usize, usize)) -> f64 {
        self.spacing
            .unwrap_or(DEFAULT_SPACING_AT_512 * content_dims.0.max(content_dims.1) as f64 / 512.0)
    }

    /// Projects the guidance onto feature grids. Dimensions are the
    /// full-resolution image sizes the masks and points refer to.
    pub fn to_grid(
        &self,
        content_dims: (usize, usize),
        style_dims: (usize, usize),
        content_grid: (usize, usize),
        style_grid: (usize, usize),
    ) -> Result<GridGuidance> {
        self.validate(content_dims, style_dims)?;
        let mut g = GridGuidance::new(content_grid, style_grid, self.beta)?;
        for r in &self.regions {
            g.push_masks(r.content.data(), content_dims, r.style.data(), style_dims)?;
        }
        let pts = expand_point_guidance(&self.points, self.effective_spacing(content_dims), content_dims, style_dims);
        g.push_points(&pts, content_dims, style_dims)?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRef {
    pub content_mask: String,
    pub style_mask: String,
}

/// Serialized guidance as exchanged with the UI and the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceDocument {
    #[serde(default)]
    pub regions: Vec<RegionRef>,
    #[serde(default)]
    pub points: Vec<PointPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
}

impl GuidanceDocument {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| doc_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Loads the referenced masks through `load` and validates the result.
    pub fn resolve(
        &self,
        load: &dyn Fn(&str) -> Result<ImageBuffer>,
        content_dims: (usize, usize),
        style_dims: (usize, usize),
    ) -> Result<GuidanceSpec> {
        let mut regions = Vec::with_capacity(self.regions.len());
        for (k, r) in self.regions.iter().enumerate() {
            let get = |field: &str, name: &str| {
                load(name)
                    .map(|img| Mask::from_image(&img))
                    .map_err(|e| doc_err(format!("regions[{k}].{field}: cannot load {name:?}: {e}")))
            };
            regions.push(RegionPair {
                content: get("content_mask", &r.content_mask)?,
                style: get("style_mask", &r.style_mask)?,
            });
        }
        let spec = GuidanceSpec {
            regions,
            points: self.points.clone(),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            spacing: self.spacing,
        };
        spec.validate(content_dims, style_dims)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ColorSpace;

    fn mask_img(h: usize, w: usize, on: bool) -> ImageBuffer {
        ImageBuffer::filled(h, w, &[if on { 1.0 } else { 0.0 }], ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn parse_and_round_trip() {
        let text = r#"{"regions":[{"content_mask":"a.png","style_mask":"b.png"}],
                       "points":[{"content":[1,2],"style":[3,4]}],"beta":5}"#;
        let doc = GuidanceDocument::parse(text).unwrap();
        assert_eq!(doc.points[0].style, [3.0, 4.0]);
        assert_eq!(GuidanceDocument::parse(&doc.to_json()).unwrap(), doc);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = GuidanceDocument::parse(r#"{"regionz": []}"#).unwrap_err();
        assert!(err.to_string().contains("regionz"), "{err}");
    }

    #[test]
    fn mismatched_mask_dims_name_the_field() {
        let doc = GuidanceDocument {
            regions: vec![RegionRef { content_mask: "c".into(), style_mask: "s".into() }],
            ..Default::default()
        };
        let load = |name: &str| Ok(if name == "c" { mask_img(10, 12, true) } else { mask_img(8, 8, true) });
        let err = doc.resolve(&load, (10, 10), (8, 8)).unwrap_err().to_string();
        assert!(err.contains("regions[0].content_mask"), "{err}");
    }

    #[test]
    fn empty_mask_and_bad_point_are_rejected() {
        let doc = GuidanceDocument {
            regions: vec![RegionRef { content_mask: "c".into(), style_mask: "s".into() }],
            ..Default::default()
        };
        let load = |name: &str| Ok(mask_img(8, 8, name == "c"));
        let err = doc.resolve(&load, (8, 8), (8, 8)).unwrap_err().to_string();
        assert!(err.contains("regions[0].style_mask: mask is empty"), "{err}");
        let doc = GuidanceDocument {
            points: vec![PointPair { content: [9.0, 1.0], style: [0.0, 0.0] }],
            ..Default::default()
        };
        let err = doc.resolve(&load, (8, 8), (8, 8)).unwrap_err().to_string();
        assert!(err.contains("points[0].content"), "{err}");
    }

    #[test]
    fn grid_projection() {
        let spec = GuidanceSpec {
            points: vec![PointPair { content: [32.0, 32.0], style: [10.0, 10.0] }],
            spacing: Some(4.0),
            ..Default::default()
        };
        let g = spec.to_grid((64, 64), (64, 64), (16, 16), (16, 16)).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(spec.effective_spacing((512, 300)), 4.0);
        assert_eq!(GuidanceSpec::default().effective_spacing((256, 128)), 10.0);
    }
}
