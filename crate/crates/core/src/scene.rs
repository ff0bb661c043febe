//! Scene data model: Gaussians, the camera, frames, and the 3D to 2D projection.

use std::collections::BTreeSet;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::keyframing::FeatureMap;
use crate::lie::Pose;
use crate::optim::AdamMoments;

/// Added to the diagonal of every projected covariance, in squared pixels.
pub const COV2D_FLOOR: f64 = 0.3;

/// Number of optimizable scalars per Gaussian.
pub const PARAM_COUNT: usize = 15;

/// Offsets of each parameter group inside [`Gaussian::params`].
pub mod param {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const OPACITY: usize = 10;
    pub const COLOR: usize = 11;
    pub const MASK: usize = 14;
}

/// Stable identifier of a Gaussian, never reused within a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GaussianId(pub u64);

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// Scales live in log space and opacity/mask as logits so every field can be
/// optimized unconstrained. `rotation` is a quaternion stored `(w, x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub id: GaussianId,
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    pub mask_logit: f64,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_3d(&self.rotation, &self.log_scale)
    }

    pub fn params(&self) -> [f64; PARAM_COUNT] {
        let mut p = [0.0; PARAM_COUNT];
        p[0..3].copy_from_slice(self.position.as_slice());
        p[3..7].copy_from_slice(self.rotation.as_slice());
        p[7..10].copy_from_slice(self.log_scale.as_slice());
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p[14] = self.mask_logit;
        p
    }

    pub fn set_params(&mut self, p: &[f64; PARAM_COUNT]) {
        self.position = Vector3::new(p[0], p[1], p[2]);
        self.rotation = Vector4::new(p[3], p[4], p[5], p[6]);
        self.log_scale = Vector3::new(p[7], p[8], p[9]);
        self.opacity_logit = p[10];
        self.color = Vector3::new(p[11], p[12], p[13]);
        self.mask_logit = p[14];
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// Pinhole intrinsics. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(SlamError::contract(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn project(&self, p_c: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        )
    }

    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (x - self.cx) * depth / self.fx,
            (y - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// Near/far clipping distances along the camera z axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for ClipRange {
    fn default() -> Self {
        ClipRange {
            z_near: 0.01,
            z_far: 100.0,
        }
    }
}

/// A timestamped RGB(-D) observation and everything the pipeline attaches to it.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub rgb: Image,
    /// Meters; 0 marks an invalid reading.
    pub depth: Option<Image>,
    pub pose: Pose,
    pub feature_map: Option<FeatureMap>,
    pub visibility: Option<BTreeSet<GaussianId>>,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64, rgb: Image, depth: Option<Image>) -> Self {
        Frame {
            index,
            timestamp,
            rgb,
            depth,
            pose: Pose::identity(),
            feature_map: None,
            visibility: None,
        }
    }

    pub fn validate(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.rgb.width() != k.width || self.rgb.height() != k.height || self.rgb.channels() != 3
        {
            return Err(SlamError::contract(format!(
                "frame {} rgb is {}x{}x{}, intrinsics say {}x{}x3",
                self.index,
                self.rgb.width(),
                self.rgb.height(),
                self.rgb.channels(),
                k.width,
                k.height
            )));
        }
        if let Some(d) = &self.depth {
            if d.width() != k.width || d.height() != k.height || d.channels() != 1 {
                return Err(SlamError::contract(format!(
                    "frame {} depth does not match the rgb image",
                    self.index
                )));
            }
        }
        Ok(())
    }
}

/// The mutable scene: Gaussians with stable ids plus their Adam moments.
#[derive(Clone, Debug)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    moments: Vec<AdamMoments<PARAM_COUNT>>,
    next_id: u64,
    adam_step: u64,
    mask_epsilon: f64,
    masks_discarded: bool,
}

impl Default for GaussianMap {
    fn default() -> Self {
        GaussianMap::new(0.01)
    }
}

impl GaussianMap {
    pub fn new(mask_epsilon: f64) -> Self {
        GaussianMap {
            gaussians: Vec::new(),
            moments: Vec::new(),
            next_id: 0,
            adam_step: 0,
            mask_epsilon,
            masks_discarded: false,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    /// Mutable parameter access. Ids must not be edited.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn get(&self, index: usize) -> &Gaussian {
        &self.gaussians[index]
    }

    pub fn mask_epsilon(&self) -> f64 {
        self.mask_epsilon
    }

    pub fn set_mask_epsilon(&mut self, eps: f64) {
        self.mask_epsilon = eps;
    }

    pub fn masks_discarded(&self) -> bool {
        self.masks_discarded
    }

    pub(crate) fn set_masks_discarded(&mut self) {
        self.masks_discarded = true;
    }

    /// Binary mask value used by the forward pass.
    pub fn mask_forward(&self, g: &Gaussian) -> f64 {
        if self.masks_discarded {
            1.0
        } else {
            crate::compaction::mask_value(g.mask_logit, self.mask_epsilon).forward
        }
    }

    /// Appends a Gaussian, assigning a fresh id; returns that id.
    pub fn push(&mut self, mut g: Gaussian) -> GaussianId {
        let id = GaussianId(self.next_id);
        self.next_id += 1;
        g.id = id;
        self.gaussians.push(g);
        self.moments.push(AdamMoments::default());
        id
    }

    /// Keeps the Gaussians for which `keep` returns true, with their moments.
    pub fn retain(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> usize {
        let before = self.gaussians.len();
        let mut kept_g = Vec::with_capacity(before);
        let mut kept_m = Vec::with_capacity(before);
        for (g, m) in self.gaussians.drain(..).zip(self.moments.drain(..)) {
            if keep(&g) {
                kept_g.push(g);
                kept_m.push(m);
            }
        }
        self.gaussians = kept_g;
        self.moments = kept_m;
        before - self.gaussians.len()
    }

    pub fn index_of(&self, id: GaussianId) -> Option<usize> {
        self.gaussians.binary_search_by_key(&id, |g| g.id).ok()
    }

    pub fn adam_step(&self) -> u64 {
        self.adam_step
    }

    /// Ids are unique and optimizer rows match the Gaussian count.
    pub fn check_invariants(&self) -> Result<()> {
        if self.moments.len() != self.gaussians.len() {
            return Err(SlamError::contract(format!(
                "optimizer state has {} rows for {} Gaussians",
                self.moments.len(),
                self.gaussians.len()
            )));
        }
        if self.gaussians.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(SlamError::contract(
                "Gaussian ids are not unique and ascending",
            ));
        }
        Ok(())
    }

    /// One Adam step over every Gaussian.
    ///
    /// `lrs` holds one learning rate per parameter slot. Quaternions are
    /// renormalized and colors clamped to [0, 1] afterwards; a Gaussian whose
    /// step is zero stays bit-identical.
    pub fn adam_update(
        &mut self,
        grads: &[[f64; PARAM_COUNT]],
        lrs: &[f64; PARAM_COUNT],
        adam: &crate::optim::AdamConfig,
    ) -> Result<()> {
        if grads.len() != self.gaussians.len() {
            return Err(SlamError::contract(format!(
                "{} gradient rows for {} Gaussians",
                grads.len(),
                self.gaussians.len()
            )));
        }
        self.adam_step += 1;
        let t = self.adam_step;
        let mut lrs = *lrs;
        if self.masks_discarded {
            lrs[param::MASK] = 0.0;
        }
        for ((g, m), grad) in self
            .gaussians
            .iter_mut()
            .zip(self.moments.iter_mut())
            .zip(grads)
        {
            let before = g.params();
            let mut p = before;
            m.step(&mut p, grad, &lrs, t, adam);
            if p == before {
                continue;
            }
            g.set_params(&p);
            let n = g.rotation.norm();
            if n > 0.0 {
                g.rotation /= n;
            } else {
                g.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }
        Ok(())
    }

    /// Bytes needed to store the map in the exported PLY body.
    pub fn storage_bytes(&self) -> usize {
        self.gaussians.len() * self.floats_per_gaussian() * 4
    }

    /// 14 floats per Gaussian, plus the mask logit until masks are discarded.
    pub fn floats_per_gaussian(&self) -> usize {
        if self.masks_discarded {
            14
        } else {
            15
        }
    }
}

/// Rotation matrix of a normalized `(w, x, y, z)` quaternion.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R S S^T R^T` for the (not necessarily normalized) quaternion and log-scales.
pub fn covariance_3d(rotation_q: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    covariance_from_scale(rotation_q, &log_scale.map(f64::exp))
}

pub(crate) fn covariance_from_scale(
    rotation_q: &Vector4<f64>,
    scale: &Vector3<f64>,
) -> Matrix3<f64> {
    let r = quat_to_matrix(&rotation_q.normalize());
    let rs = r * Matrix3::from_diagonal(scale);
    let cov = rs * rs.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub p_cam: Vector3<f64>,
}

/// First-order perspective Jacobian at a camera-frame point (the upper 2x3 block).
pub fn projection_jacobian(p_c: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p_c.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p_c.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p_c.y * iz2,
    )
}

/// Projects a Gaussian into the image. `None` when the mean is outside the clip range.
pub fn project_gaussian(
    g: &Gaussian,
    pose: &Pose,
    k: &CameraIntrinsics,
    clip: &ClipRange,
) -> Option<Projection> {
    project_parts(&g.position, &g.covariance(), pose, k, clip)
}

pub(crate) fn project_parts(
    position: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
    clip: &ClipRange,
) -> Option<Projection> {
    let p_c = pose.transform_point(position);
    if !(p_c.z > clip.z_near && p_c.z < clip.z_far) {
        return None;
    }
    let w = pose.rotation();
    let j = projection_jacobian(&p_c, k);
    let cam_cov = w * cov3d * w.transpose();
    let mut cov2d = j * cam_cov * j.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    Some(Projection {
        mean2d: k.project(&p_c),
        cov2d,
        depth: p_c.z,
        p_cam: p_c,
    })
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub(crate) fn max_eigenvalue(c: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let diff = 0.5 * (c[(0, 0)] - c[(1, 1)]);
    mid + (diff * diff + c[(0, 1)] * c[(0, 1)]).sqrt()
}

/// A Gaussian that survived frustum culling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CulledGaussian {
    /// Position in the map's Gaussian list.
    pub index: usize,
    pub id: GaussianId,
    pub projection: Projection,
}

/// Gaussians whose 3-sigma screen box meets the image and whose depth is inside the
/// clip range, front to back (ties broken by id).
pub fn frustum_cull(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    clip: &ClipRange,
) -> Vec<CulledGaussian> {
    let xmax = k.width as f64 - 0.5;
    let ymax = k.height as f64 - 0.5;
    let mut out: Vec<CulledGaussian> = map
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let projection = project_gaussian(g, pose, k, clip)?;
            let r = 3.0 * max_eigenvalue(&projection.cov2d).sqrt();
            let m = projection.mean2d;
            let hit = m.x + r >= -0.5 && m.x - r <= xmax && m.y + r >= -0.5 && m.y - r <= ymax;
            hit.then_some(CulledGaussian {
                index,
                id: g.id,
                projection,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.projection
            .depth
            .total_cmp(&b.projection.depth)
            .then(a.id.cmp(&b.id))
    });
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lie::{exp, Tangent};
    use approx::assert_relative_eq;

    pub(crate) fn gaussian_at(p: Vector3<f64>, scale: f64) -> Gaussian {
        Gaussian {
            id: GaussianId(0),
            position: p,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(0.9),
            color: Vector3::new(0.2, 0.4, 0.6),
            mask_logit: logit(0.99),
        }
    }

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            depth_scale: 5000.0,
        }
    }

    #[test]
    fn covariance_identity_cases() {
        let q = Vector4::new(1.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(covariance_3d(&q, &Vector3::zeros()), Matrix3::identity());
        let s = Vector3::new(0.5f64, 2.0, 3.0);
        let cov = covariance_3d(&q, &s.map(f64::ln));
        assert_relative_eq!(
            cov,
            Matrix3::from_diagonal(&s.component_mul(&s)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_quarter_turn() {
        // R_z(90) diag(4,1,1) R_z(90)^T multiplied out by hand is diag(1,4,1).
        let h = std::f64::consts::FRAC_PI_4;
        let q = Vector4::new(h.cos(), 0.0, 0.0, h.sin());
        let cov = covariance_3d(&q, &Vector3::new(2f64.ln(), 0.0, 0.0));
        assert_relative_eq!(
            cov,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let q = Vector4::new(0.3, -0.5, 0.7, 0.1);
        let cov = covariance_3d(&q, &Vector3::new(-1.0, 0.2, -3.0));
        assert_eq!(cov, cov.transpose());
        let jittered = cov + Matrix3::identity() * 1e-12;
        assert!(jittered.cholesky().is_some());
    }

    #[test]
    fn projection_of_on_axis_point() {
        let g = gaussian_at(Vector3::new(0.0, 0.0, 1.0), 0.01);
        let p =
            project_gaussian(&g, &Pose::identity(), &intrinsics(), &ClipRange::default()).unwrap();
        assert_relative_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn isotropic_projection_covariance() {
        let (sigma, d) = (0.05, 2.0);
        let g = gaussian_at(Vector3::new(0.0, 0.0, d), sigma);
        let p =
            project_gaussian(&g, &Pose::identity(), &intrinsics(), &ClipRange::default()).unwrap();
        // On-axis J = diag(fx/d, fy/d) in its first two columns, so J (s^2 I) J^T = (fx s/d)^2 I.
        let expected = (100.0 * sigma / d).powi(2) + COV2D_FLOOR;
        assert_relative_eq!(p.cov2d, Matrix2::identity() * expected, epsilon = 1e-12);
    }

    #[test]
    fn pose_translation_shifts_mean() {
        let z = 2.0;
        let g = gaussian_at(Vector3::new(0.0, 0.0, z), 0.01);
        // Camera moved 0.1 m along +x: camera-from-world translation is -0.1.
        let pose = exp(&Tangent::from_slice(&[-0.1, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_relative_eq!(pose.center(), Vector3::new(0.1, 0.0, 0.0));
        let base =
            project_gaussian(&g, &Pose::identity(), &intrinsics(), &ClipRange::default()).unwrap();
        let moved = project_gaussian(&g, &pose, &intrinsics(), &ClipRange::default()).unwrap();
        // Pinhole: u = cx + fx (x - 0.1) / z.
        assert_relative_eq!(
            moved.mean2d.x - base.mean2d.x,
            -100.0 * 0.1 / z,
            epsilon = 1e-12
        );
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = gaussian_at(Vector3::new(0.0, 0.0, -1.0), 0.01);
        assert!(
            project_gaussian(&g, &Pose::identity(), &intrinsics(), &ClipRange::default()).is_none()
        );
        let mut map = GaussianMap::default();
        assert!(frustum_cull(
            &map,
            &Pose::identity(),
            &intrinsics(),
            &ClipRange::default()
        )
        .is_empty());
        map.push(g);
        assert!(frustum_cull(
            &map,
            &Pose::identity(),
            &intrinsics(),
            &ClipRange::default()
        )
        .is_empty());
    }

    #[test]
    fn cull_sorts_by_depth_then_id() {
        let mut map = GaussianMap::default();
        let far = map.push(gaussian_at(Vector3::new(0.0, 0.0, 2.0), 0.01));
        let near = map.push(gaussian_at(Vector3::new(0.0, 0.0, 1.0), 0.01));
        let tie = map.push(gaussian_at(Vector3::new(0.1, 0.0, 2.0), 0.01));
        let list = frustum_cull(
            &map,
            &Pose::identity(),
            &intrinsics(),
            &ClipRange::default(),
        );
        let ids: Vec<_> = list.iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![near, far, tie]);
        let again = frustum_cull(
            &map,
            &Pose::identity(),
            &intrinsics(),
            &ClipRange::default(),
        );
        assert_eq!(list, again);
    }

    #[test]
    fn cull_drops_offscreen() {
        let mut map = GaussianMap::default();
        map.push(gaussian_at(Vector3::new(5.0, 0.0, 1.0), 0.01));
        assert!(frustum_cull(
            &map,
            &Pose::identity(),
            &intrinsics(),
            &ClipRange::default()
        )
        .is_empty());
    }
}
