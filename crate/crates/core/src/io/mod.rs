//! Datasets, synthetic scenes, metrics, exports, configuration and the pipeline driver.

pub mod config;
pub mod dataset;
pub mod export;
pub mod metrics;
pub mod synthetic;
pub mod system;

pub use config::{DatasetFormat, RunConfig};
pub use dataset::{load_folder, load_tum, Dataset, TimedPose};
pub use export::{export_ply, export_trajectory, import_ply};
pub use metrics::{ate_rmse, psnr, ssim};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use system::{run_slam, RunMetrics, RunReport};
