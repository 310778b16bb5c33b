//! Pose-free Gaussian splatting: rendering, hand-written gradients,
//! correspondence-guided pose estimation and evaluation metrics.

pub mod autodiff;
pub mod correspond;
pub mod error;
pub mod eval;
pub mod gaussians;
pub mod geom;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod renderer;
pub mod synth;

pub use error::{Error, Result};
