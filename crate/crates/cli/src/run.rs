//! Executes a configured job on decoded inputs.

use serde_json::{json, Value};

use stylecore::colorpost::{post_process, ColorPostConfig};
use stylecore::dst::{dst_stylize, CleanConfig, CorrespondenceDocument};
use stylecore::guidance::GuidanceSpec;
use stylecore::progress::Observer;
use stylecore::{nnst, strotss, ImageBuffer, Result};

use crate::config::JobConfig;

/// Everything a job reads besides its config.
#[derive(Clone, Debug)]
pub struct JobInputs {
    pub content: ImageBuffer,
    pub style: ImageBuffer,
    /// Region and point guidance (STROTSS only).
    pub guidance: Option<GuidanceSpec>,
    /// Keypoint correspondences (DST only).
    pub points: Option<CorrespondenceDocument>,
}

#[derive(Clone, Debug)]
pub struct JobOutput {
    pub image: ImageBuffer,
    /// Per-scale optimization records.
    pub report: Value,
}

/// Checks that the inputs fit the job kind before anything is queued.
pub fn check_inputs(cfg: &JobConfig, inputs: &JobInputs) -> std::result::Result<(), (String, String)> {
    let cdims = (inputs.content.height(), inputs.content.width());
    let sdims = (inputs.style.height(), inputs.style.width());
    match cfg {
        JobConfig::Strotss(_) => {}
        _ if inputs.guidance.is_some() => {
            return Err(("guidance".into(), format!("{} jobs do not accept guidance", cfg.kind())));
        }
        _ => {}
    }
    if let Some(g) = &inputs.guidance {
        g.validate(cdims, sdims).map_err(|e| field_path("guidance", &e))?;
    }
    match (cfg, &inputs.points) {
        (JobConfig::Dst(_), None) => return Err(("points".into(), "dst jobs need a correspondence document".into())),
        (JobConfig::Dst(_), Some(doc)) => {
            doc.validate(cdims, sdims).map_err(|e| field_path("points", &e))?;
            doc.prepare(&CleanConfig::default()).map_err(|e| field_path("points", &e))?;
        }
        (_, Some(_)) => return Err(("points".into(), format!("{} jobs do not take points", cfg.kind()))),
        _ => {}
    }
    Ok(())
}

/// Splits a document error into `(root.field, message)` when the message
/// starts with a field path, else `(root, message)`.
pub fn field_path(root: &str, e: &stylecore::Error) -> (String, String) {
    let text = match e {
        stylecore::Error::Document { message, .. } => message.clone(),
        other => other.to_string(),
    };
    match text.split_once(": ") {
        Some((f, rest)) if !f.contains(' ') => (format!("{root}.{f}"), rest.to_string()),
        _ => (root.to_string(), text),
    }
}

pub fn execute(cfg: &JobConfig, inputs: &JobInputs, observer: &dyn Observer) -> Result<JobOutput> {
    match cfg {
        JobConfig::Strotss(c) => {
            let out = strotss::stylize(&inputs.content, &inputs.style, c, inputs.guidance.as_ref(), observer)?;
            let mut sel = strotss::Selections::default();
            out.reports.iter().for_each(|r| sel.absorb(r.selections));
            Ok(JobOutput { image: out.image, report: json!({"scales": out.reports, "selections": sel}) })
        }
        JobConfig::Nnst(n) => {
            let out = nnst::stylize(&inputs.content, &inputs.style, &n.config, observer)?;
            let post = ColorPostConfig { enabled: n.color_post, ..Default::default() };
            let image = post_process(&out.image.clamp01(), &inputs.content, &inputs.style, &post)?;
            Ok(JobOutput { image, report: json!({"passes": out.passes, "split_losses": out.split_losses}) })
        }
        JobConfig::Dst(d) => {
            let doc = inputs
                .points
                .as_ref()
                .ok_or_else(|| stylecore::Error::InvalidArgument("dst jobs need a correspondence document".into()))?;
            let corr = doc.prepare(&CleanConfig::default())?;
            let out = dst_stylize(&inputs.content, &inputs.style, &corr, d, observer)?;
            Ok(JobOutput {
                image: out.image,
                report: json!({"scales": out.reports, "theta": out.theta.theta(), "keypoints": corr.sources()}),
            })
        }
    }
}
