//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use crate::compaction::{DensifyConfig, MaskConfig};
use crate::error::{Result, SlamError};
use crate::keyframing::WindowConfig;
use crate::mapping::MappingConfig;
use crate::raster::TRANSMITTANCE_CUTOFF;
use crate::tracking::TrackingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Tum,
    Folder,
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tum" => Ok(DatasetFormat::Tum),
            "folder" => Ok(DatasetFormat::Folder),
            "synthetic" => Ok(DatasetFormat::Synthetic),
            _ => Err(format!(
                "unknown dataset format {s:?} (tum, folder, synthetic)"
            )),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetFormat::Tum => "tum",
            DatasetFormat::Folder => "folder",
            DatasetFormat::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: Option<PathBuf>,
    pub dataset_format: DatasetFormat,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub single_thread: bool,
    /// Transmittance cutoff; 0 disables early stopping.
    pub early_stop: f64,
    /// Process at most this many frames (0 = all).
    pub max_frames: usize,
    pub mask: MaskConfig,
    pub densify: DensifyConfig,
    pub window: WindowConfig,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: None,
            dataset_format: DatasetFormat::Synthetic,
            seed: 0,
            output_dir: None,
            single_thread: true,
            early_stop: TRANSMITTANCE_CUTOFF,
            max_frames: 0,
            mask: MaskConfig::default(),
            densify: DensifyConfig::default(),
            window: WindowConfig::default(),
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_path(_: &str, value: &str) -> std::result::Result<Option<PathBuf>, String> {
    Ok((!value.is_empty()).then(|| PathBuf::from(value)))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

macro_rules! knobs {
    ($($key:literal => $($field:ident).+ : $parse:expr, $show:expr;)*) => {
        /// Every recognized key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
            match key {
                $($key => self.$($field).+ = $parse(key, value)?,)*
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        }

        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, $show(&self.$($field).+))),*]
        }
    };
}

fn show<T: ToString>(v: &T) -> String {
    v.to_string()
}

impl RunConfig {
    knobs! {
        "dataset_path" => dataset_path: parse_path, show_path;
        "dataset_format" => dataset_format: parse, show;
        "seed" => seed: parse, show;
        "output_dir" => output_dir: parse_path, show_path;
        "single_thread" => single_thread: parse, show;
        "early_stop" => early_stop: parse, show;
        "max_frames" => max_frames: parse, show;
        "mask.epsilon" => mask.epsilon: parse, show;
        "mask.lambda1" => mask.lambda1: parse, show;
        "mask.lambda2" => mask.lambda2: parse, show;
        "mask.beta" => mask.beta: parse, show;
        "densify.grad_threshold" => densify.grad_threshold: parse, show;
        "densify.opacity_threshold" => densify.opacity_threshold: parse, show;
        "densify.small_scale" => densify.small_scale: parse, show;
        "densify.interval" => densify.interval: parse, show;
        "densify.split_factor" => densify.split_factor: parse, show;
        "window.motion_threshold" => window.motion_threshold: parse, show;
        "window.max_frame_interval" => window.max_frame_interval: parse, show;
        "window.info_threshold" => window.info_threshold: parse, show;
        "window.min_mapping_distance" => window.min_mapping_distance: parse, show;
        "window.capacity" => window.window_capacity: parse, show;
        "window.oc_removal_threshold" => window.oc_removal_threshold: parse, show;
        "tracking.iterations" => tracking.iterations: parse, show;
        "tracking.rotation_lr" => tracking.rotation_lr: parse, show;
        "tracking.translation_lr" => tracking.translation_lr: parse, show;
        "tracking.convergence_tol" => tracking.convergence_tol: parse, show;
        "tracking.depth_weight" => tracking.depth_weight: parse, show;
        "tracking.patience" => tracking.patience: parse, show;
        "mapping.history" => mapping.history: parse, show;
        "mapping.iterations" => mapping.iterations_per_update: parse, show;
        "mapping.refinement_iterations" => mapping.refinement_iterations: parse, show;
        "mapping.insertion_stride" => mapping.insertion_stride: parse, show;
        "mapping.depth_weight" => mapping.depth_weight: parse, show;
        "mapping.color_refinement_interval" => mapping.color_refinement_interval: parse, show;
        "mapping.color_refinement_iterations" => mapping.color_refinement_iterations: parse, show;
        "mapping.lr.position" => mapping.lr.position: parse, show;
        "mapping.lr.color" => mapping.lr.color: parse, show;
        "mapping.lr.opacity" => mapping.lr.opacity: parse, show;
        "mapping.lr.scale" => mapping.lr.scale: parse, show;
        "mapping.lr.rotation" => mapping.lr.rotation: parse, show;
        "mapping.lr.mask" => mapping.lr.mask: parse, show;
        "mapping.lr.pose_rotation" => mapping.lr.pose_rotation: parse, show;
        "mapping.lr.pose_translation" => mapping.lr.pose_translation: parse, show;
        "synthetic.gaussians" => synthetic.gaussians: parse, show;
        "synthetic.extent" => synthetic.extent: parse, show;
        "synthetic.frames" => synthetic.frames: parse, show;
        "synthetic.width" => synthetic.width: parse, show;
        "synthetic.height" => synthetic.height: parse, show;
        "synthetic.focal" => synthetic.focal: parse, show;
        "synthetic.radius" => synthetic.radius: parse, show;
        "synthetic.arc_degrees" => synthetic.arc_degrees: parse, show;
        "synthetic.bob" => synthetic.bob: parse, show;
        "synthetic.min_scale" => synthetic.min_scale: parse, show;
        "synthetic.max_scale" => synthetic.max_scale: parse, show;
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SlamError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.mapping.mask = cfg.mask;
        cfg.mapping.densify = cfg.densify;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SlamError::io(path, e))?;
        RunConfig::parse_str(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Keeps the copies of the shared sections in sync after programmatic edits.
    pub fn sync(&mut self) {
        self.mapping.mask = self.mask;
        self.mapping.densify = self.densify;
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.window.validate()?;
        self.tracking.validate()?;
        self.mapping.validate()?;
        if self.dataset_format != DatasetFormat::Synthetic {
            match &self.dataset_path {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(SlamError::Config(format!(
                        "dataset path {} does not exist",
                        p.display()
                    )))
                }
                None => return Err(SlamError::Config("dataset_path is required".into())),
            }
        }
        Ok(())
    }
}
