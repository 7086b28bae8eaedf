//! Neural style transfer engine.

pub mod autodiff;
pub mod color;
pub mod colorpost;
pub mod dst;
pub mod error;
pub mod features;
pub mod gram;
pub mod guidance;
pub mod image;
pub mod nnst;
pub mod optim;
pub mod progress;
pub mod pyramid;
pub mod selfsim;
pub mod strotss;
pub mod transport;

pub use error::{Error, Result};
pub use image::{ColorSpace, ImageBuffer};
