//! RGB-D SLAM on a compact set of differentiable 3D Gaussians, entirely on the CPU.

pub mod compaction;
pub mod error;
pub mod image;
pub mod io;
pub mod keyframing;
pub mod lie;
pub mod mapping;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod tracking;

pub use error::{Result, SlamError};
