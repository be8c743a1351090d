//! Viewpoint-conditioned diffusion for novel view synthesis, score
//! distillation into voxel radiance fields, mesh extraction, and evaluation.

pub mod autograd;
pub mod camera;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod image;
mod mc_tables;
pub mod meshing;
pub mod metrics;
pub mod parallel;
pub mod scene;
pub mod voxelfield;

pub use error::{Error, Result};
