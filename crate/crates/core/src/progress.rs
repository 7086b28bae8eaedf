//! Progress reporting and cooperative cancellation for long-running jobs.

use crate::image::ImageBuffer;

/// Snapshot emitted after every optimizer step.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Progress {
    /// Zero-based scale index.
    pub scale: usize,
    pub scales: usize,
    /// One-based step within the scale.
    pub step: usize,
    pub steps: usize,
    pub loss: f64,
}

pub trait Observer {
    fn on_step(&self, _p: &Progress) {}

    /// Steps between previews; `None` disables them.
    fn preview_every(&self) -> Option<usize> {
        None
    }

    fn on_preview(&self, _p: &Progress, _img: &ImageBuffer) {}

    /// Polled at step boundaries; returning true aborts with
    /// [`Error::Cancelled`](crate::Error::Cancelled).
    fn cancelled(&self) -> bool {
        false
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

pub(crate) fn wants_preview(obs: &dyn Observer, step: usize, steps: usize) -> bool {
    match obs.preview_every() {
        Some(k) if k > 0 => step % k == 0 || step == steps,
        _ => false,
    }
}
