//! Deterministic synthetic RGB-D sequences rendered from a random Gaussian map.

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetFrame, FrameData, TimedPose};
use crate::image::Image;
use crate::lie::Pose;
use crate::raster::render_reference;
use crate::scene::{logit, CameraIntrinsics, Gaussian, GaussianId, GaussianMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub gaussians: usize,
    /// Side of the cube the Gaussians fill, meters, centered at the origin.
    pub extent: f64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Camera distance from the cube center.
    pub radius: f64,
    /// Total orbit angle, degrees.
    pub arc_degrees: f64,
    /// Peak vertical bob, meters.
    pub bob: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            gaussians: 300,
            extent: 2.0,
            frames: 60,
            width: 64,
            height: 64,
            focal: 60.0,
            radius: 2.6,
            arc_degrees: 40.0,
            bob: 0.1,
            min_scale: 0.08,
            max_scale: 0.25,
        }
    }
}

/// Camera-from-world pose at `center` looking at `target`, image y pointing along world +y.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r_wc = Matrix3::from_columns(&[x, y, z]);
    Pose::new(r_wc.transpose(), -(r_wc.transpose() * center))
}

/// Camera-from-world poses along the orbit.
pub fn synthetic_trajectory(spec: &SyntheticSpec) -> Vec<Pose> {
    let n = spec.frames;
    (0..n)
        .map(|i| {
            let s = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let theta = (s - 0.5) * spec.arc_degrees.to_radians();
            let c = Vector3::new(
                spec.radius * theta.sin(),
                spec.bob * (2.0 * PI * s).sin(),
                -spec.radius * theta.cos(),
            );
            look_at(&c, &Vector3::zeros())
        })
        .collect()
}

pub fn random_map(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> GaussianMap {
    let mut map = GaussianMap::default();
    let half = spec.extent / 2.0;
    let (lo, hi) = (spec.min_scale.ln(), spec.max_scale.ln());
    for _ in 0..spec.gaussians {
        let position = Vector3::from_fn(|_, _| rng.random_range(-half..half));
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-PI..PI),
            rng.random_range(-PI / 2.0..PI / 2.0),
            rng.random_range(-PI..PI),
        );
        let qv = q.into_inner().coords;
        map.push(Gaussian {
            id: GaussianId(0),
            position,
            rotation: Vector4::new(qv.w, qv.x, qv.y, qv.z),
            log_scale: Vector3::from_fn(|_, _| rng.random_range(lo..hi)),
            opacity_logit: logit(rng.random_range(0.6..0.95)),
            color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            mask_logit: logit(0.99),
        });
    }
    map
}

/// Renders every pose with the reference compositor. Depth is the alpha-normalized
/// composited depth where alpha >= 0.5 and 0 (invalid) elsewhere.
pub fn render_frames(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    poses: &[Pose],
) -> Vec<(Image, Image)> {
    poses
        .iter()
        .map(|pose| {
            let out = render_reference(map, pose, k, &Vector3::zeros());
            let depth = Image::from_fn(k.width, k.height, 1, |x, y, _| {
                let a = out.alpha.get(x, y, 0);
                if a >= 0.5 {
                    out.depth.get(x, y, 0) / a
                } else {
                    0.0
                }
            });
            (out.color, depth)
        })
        .collect()
}

pub fn synthetic_intrinsics(spec: &SyntheticSpec) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: spec.focal,
        fy: spec.focal,
        cx: (spec.width as f64 - 1.0) / 2.0,
        cy: (spec.height as f64 - 1.0) / 2.0,
        width: spec.width,
        height: spec.height,
        depth_scale: 5000.0,
    }
}

/// Dataset (in memory, 30 Hz timestamps) and the map it was rendered from.
pub fn generate_synthetic(seed: u64, spec: &SyntheticSpec) -> (Dataset, GaussianMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = random_map(spec, &mut rng);
    let k = synthetic_intrinsics(spec);
    let poses = synthetic_trajectory(spec);
    let frames = render_frames(&map, &k, &poses);
    let ts = |i: usize| i as f64 / 30.0;
    let dataset = Dataset {
        intrinsics: k,
        frames: frames
            .into_iter()
            .enumerate()
            .map(|(i, (rgb, depth))| DatasetFrame {
                timestamp: ts(i),
                data: FrameData::Memory {
                    rgb,
                    depth: Some(depth),
                },
            })
            .collect(),
        ground_truth: Some(
            poses
                .iter()
                .enumerate()
                .map(|(i, p)| TimedPose {
                    timestamp: ts(i),
                    pose: *p,
                })
                .collect(),
        ),
        dropped: 0,
    };
    (dataset, map)
}
