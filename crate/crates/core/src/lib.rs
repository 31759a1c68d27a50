//! Gaussian splatting for imaging sonar.
//!
//! Scenes of 3D Gaussians are rendered into polar sonar frames with a
//! two-pass splatting scheme (occlusion resolved once per Gaussian in the
//! elevation-azimuth frame, intensity accumulated in the polar frame), fit
//! to data together with a per-image Gaussian-mixture noise model, and
//! converted to meshes for geometric evaluation.

pub mod config;
pub mod dataset;
pub mod error;
pub mod frame;
pub mod gaussian;
pub mod geometry;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod ply;
pub mod reconstruction;
pub mod sim;
pub mod raster;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
