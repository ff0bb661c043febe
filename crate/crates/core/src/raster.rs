//! Tile-based differentiable rasterization of the Gaussian map.
//!
//! Forward: culled Gaussians are composited front to back per pixel with
//! `alpha_i = opacity_i * mask_i * exp(-0.5 d^T cov2d^-1 d)`. Color and depth use
//! the same weights `alpha_i * T_i`; whatever transmittance is left is filled with
//! the background color (and zero depth).
//!
//! Backward: exact reverse mode through compositing, the 2D conic, the
//! projection, the 3D covariance and the camera pose.

use std::collections::BTreeSet;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::lie::{Pose, Tangent};
use crate::scene::{
    covariance_from_scale, frustum_cull, max_eigenvalue, param, projection_jacobian,
    quat_to_matrix, sigmoid, CameraIntrinsics, ClipRange, GaussianId, GaussianMap, PARAM_COUNT,
};

pub const TILE_SIZE: usize = 16;

/// Default transmittance below which compositing stops.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;

/// A Gaussian counts as visible once its weight at some pixel exceeds this.
pub const VISIBLE_WEIGHT: f64 = 1e-6;

/// Tile binning radius in standard deviations; the kernel is below 3e-11 beyond it.
const BIN_SIGMAS: f64 = 7.0;
const KERNEL_MIN_POWER: f64 = -0.5 * BIN_SIGMAS * BIN_SIGMAS;

/// Projected covariances with a smaller determinant are skipped.
const MIN_COV_DET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: Vector3<f64>,
    pub clip: ClipRange,
    /// Stop compositing a pixel once transmittance falls below this; `None` never stops.
    pub early_stop: Option<f64>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: Vector3::zeros(),
            clip: ClipRange::default(),
            early_stop: Some(TRANSMITTANCE_CUTOFF),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    /// Accumulated opacity, `1 - T_final`.
    pub alpha: Image,
    pub visible_ids: BTreeSet<GaussianId>,
    /// Gaussians composited at each pixel before stopping.
    pub contrib_counts: Vec<u32>,
    /// Culled Gaussians dropped for a degenerate 2D covariance.
    pub skipped_degenerate: usize,
}

/// Gradients of a scalar loss w.r.t. every Gaussian parameter and the camera pose.
#[derive(Clone, Debug)]
pub struct RenderGradients {
    /// One row per map Gaussian, laid out like [`crate::scene::Gaussian::params`].
    pub gaussians: Vec<[f64; PARAM_COUNT]>,
    /// Loss gradient w.r.t. each projected mean, in pixels (densification statistic).
    pub mean2d: Vec<Vector2<f64>>,
    pub pose: Tangent,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        RenderGradients {
            gaussians: vec![[0.0; PARAM_COUNT]; n],
            mean2d: vec![Vector2::zeros(); n],
            pose: Tangent::zero(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite()
            && self.gaussians.iter().flatten().all(|v| v.is_finite())
            && self
                .mean2d
                .iter()
                .all(|v| v.x.is_finite() && v.y.is_finite())
    }

    /// `self += other`, with the pose gradient added too.
    pub fn accumulate(&mut self, other: &RenderGradients) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.mean2d.iter_mut().zip(&other.mean2d) {
            *a += b;
        }
        self.pose.0 += other.pose.0;
    }
}

/// A culled Gaussian ready for compositing.
#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    id: GaussianId,
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    p_cam: Vector3<f64>,
    radius: f64,
}

impl Splat {
    #[inline]
    fn kernel(&self, px: f64, py: f64) -> Option<(f64, f64, f64)> {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        // outside the binning ellipse the contribution is treated as exactly zero
        (power >= KERNEL_MIN_POWER).then(|| (power.exp(), dx, dy))
    }
}

fn prepare(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> (Vec<Splat>, usize) {
    let mut skipped = 0;
    let splats = frustum_cull(map, pose, k, &settings.clip)
        .into_iter()
        .filter_map(|c| {
            let g = map.get(c.index);
            if map.mask_forward(g) == 0.0 {
                return None;
            }
            let cov = c.projection.cov2d;
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
            if det.is_nan() || det < MIN_COV_DET {
                skipped += 1;
                return None;
            }
            Some(Splat {
                index: c.index,
                id: c.id,
                mean: c.projection.mean2d,
                cov,
                conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
                opacity: g.opacity(),
                color: g.color,
                depth: c.projection.depth,
                p_cam: c.projection.p_cam,
                radius: BIN_SIGMAS * max_eigenvalue(&cov).sqrt(),
            })
        })
        .collect();
    (splats, skipped)
}

/// Splat indices per tile, in global front-to-back order.
fn bin_tiles(splats: &[Splat], k: &CameraIntrinsics) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let max_x = k.width as f64 - 1.0;
    let max_y = k.height as f64 - 1.0;
    for (i, s) in splats.iter().enumerate() {
        let x0 = (s.mean.x - s.radius).ceil().max(0.0);
        let x1 = (s.mean.x + s.radius).floor().min(max_x);
        let y0 = (s.mean.y - s.radius).ceil().max(0.0);
        let y1 = (s.mean.y + s.radius).floor().min(max_y);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
        let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    (tiles_x, tiles_y, bins)
}

struct PixelResult {
    color: Vector3<f64>,
    depth: f64,
    transmittance: f64,
    count: u32,
}

#[inline]
fn composite_pixel<'a>(
    px: f64,
    py: f64,
    splats: impl Iterator<Item = (usize, &'a Splat)>,
    early_stop: Option<f64>,
    visible: &mut [bool],
) -> PixelResult {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    let mut count = 0;
    for (i, s) in splats {
        let Some((kernel, _, _)) = s.kernel(px, py) else {
            continue;
        };
        let alpha = s.opacity * kernel;
        let w = alpha * t;
        color += s.color * w;
        depth += s.depth * w;
        if w > VISIBLE_WEIGHT {
            visible[i] = true;
        }
        t *= 1.0 - alpha;
        count += 1;
        if early_stop.is_some_and(|cut| t < cut) {
            break;
        }
    }
    PixelResult {
        color,
        depth,
        transmittance: t,
        count,
    }
}

fn empty_output(k: &CameraIntrinsics) -> RenderOutput {
    RenderOutput {
        color: Image::new(k.width, k.height, 3),
        depth: Image::new(k.width, k.height, 1),
        alpha: Image::new(k.width, k.height, 1),
        visible_ids: BTreeSet::new(),
        contrib_counts: vec![0; k.width * k.height],
        skipped_degenerate: 0,
    }
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, r: &PixelResult, bg: &Vector3<f64>) {
    for c in 0..3 {
        out.color.set(x, y, c, r.color[c] + r.transmittance * bg[c]);
    }
    out.depth.set(x, y, 0, r.depth);
    out.alpha.set(x, y, 0, 1.0 - r.transmittance);
    out.contrib_counts[y * out.color.width() + x] = r.count;
}

/// Tile-binned forward render.
pub fn render(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> RenderOutput {
    let (splats, skipped) = prepare(map, pose, k, settings);
    let (tiles_x, tiles_y, bins) = bin_tiles(&splats, k);
    let mut out = empty_output(k);
    out.skipped_degenerate = skipped;
    let mut visible = vec![false; splats.len()];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[ty * tiles_x + tx];
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(k.height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(k.width) {
                    let it = bin.iter().map(|&i| (i as usize, &splats[i as usize]));
                    let r =
                        composite_pixel(x as f64, y as f64, it, settings.early_stop, &mut visible);
                    write_pixel(&mut out, x, y, &r, &settings.background);
                }
            }
        }
    }
    out.visible_ids = splats
        .iter()
        .zip(&visible)
        .filter(|(_, v)| **v)
        .map(|(s, _)| s.id)
        .collect();
    out
}

/// Naive compositor: every culled Gaussian at every pixel, no tiles, no early stop.
pub fn render_reference(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    background: &Vector3<f64>,
) -> RenderOutput {
    let settings = RenderSettings {
        background: *background,
        early_stop: None,
        ..RenderSettings::default()
    };
    let (splats, skipped) = prepare(map, pose, k, &settings);
    let mut out = empty_output(k);
    out.skipped_degenerate = skipped;
    let mut visible = vec![false; splats.len()];
    for y in 0..k.height {
        for x in 0..k.width {
            let r = composite_pixel(
                x as f64,
                y as f64,
                splats.iter().enumerate(),
                None,
                &mut visible,
            );
            write_pixel(&mut out, x, y, &r, background);
        }
    }
    out.visible_ids = splats
        .iter()
        .zip(&visible)
        .filter(|(_, v)| **v)
        .map(|(s, _)| s.id)
        .collect();
    out
}

/// Screen-space gradient accumulators for one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    color: Vector3<f64>,
    depth: f64,
    opacity: f64,
    mean: Vector2<f64>,
    conic: [f64; 3],
}

struct Entry {
    splat: u32,
    alpha: f64,
    kernel: f64,
    t: f64,
    dx: f64,
    dy: f64,
}

/// Reverse-mode gradients of `sum(dL_dcolor . color + dL_ddepth * depth + dL_dalpha * alpha)`.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    output: &RenderOutput,
    dl_dcolor: &Image,
    dl_ddepth: &Image,
    dl_dalpha: &Image,
) -> Result<RenderGradients> {
    let (w, h) = (k.width, k.height);
    let shapes = [
        (&output.color, 3, "rendered color"),
        (dl_dcolor, 3, "dL/dcolor"),
        (dl_ddepth, 1, "dL/ddepth"),
        (dl_dalpha, 1, "dL/dalpha"),
    ];
    for (img, ch, name) in shapes {
        if img.width() != w || img.height() != h || img.channels() != ch {
            return Err(SlamError::contract(format!(
                "{name} is {}x{}x{}, expected {w}x{h}x{ch}",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
    }

    let (splats, _) = prepare(map, pose, k, settings);
    let (tiles_x, tiles_y, bins) = bin_tiles(&splats, k);
    let mut sg = vec![SplatGrad::default(); splats.len()];
    let bg = settings.background;
    let mut entries: Vec<Entry> = Vec::new();

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[ty * tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let dc = Vector3::new(
                        dl_dcolor.get(x, y, 0),
                        dl_dcolor.get(x, y, 1),
                        dl_dcolor.get(x, y, 2),
                    );
                    let dd = dl_ddepth.get(x, y, 0);
                    let da = dl_dalpha.get(x, y, 0);
                    if dc == Vector3::zeros() && dd == 0.0 && da == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64, y as f64);

                    entries.clear();
                    let mut t = 1.0;
                    for &i in bin {
                        let s = &splats[i as usize];
                        let Some((kernel, dx, dy)) = s.kernel(px, py) else {
                            continue;
                        };
                        let alpha = s.opacity * kernel;
                        entries.push(Entry {
                            splat: i,
                            alpha,
                            kernel,
                            t,
                            dx,
                            dy,
                        });
                        t *= 1.0 - alpha;
                        if settings.early_stop.is_some_and(|cut| t < cut) {
                            break;
                        }
                    }

                    // rest = normalized loss contribution of everything behind the current entry
                    let mut rest = dc.dot(&bg);
                    for e in entries.iter().rev() {
                        let s = &splats[e.splat as usize];
                        let g = &mut sg[e.splat as usize];
                        let weight = e.alpha * e.t;
                        let own = dc.dot(&s.color) + dd * s.depth + da;
                        let d_alpha = e.t * (own - rest);
                        rest = e.alpha * own + (1.0 - e.alpha) * rest;

                        g.color += dc * weight;
                        g.depth += dd * weight;
                        g.opacity += d_alpha * e.kernel;
                        let d_power = d_alpha * e.alpha;
                        let [qa, qb, qc] = s.conic;
                        g.mean.x += d_power * (qa * e.dx + qb * e.dy);
                        g.mean.y += d_power * (qb * e.dx + qc * e.dy);
                        g.conic[0] += -0.5 * d_power * e.dx * e.dx;
                        g.conic[1] += -d_power * e.dx * e.dy;
                        g.conic[2] += -0.5 * d_power * e.dy * e.dy;
                    }
                }
            }
        }
    }

    let mut grads = RenderGradients::zeros(map.len());
    let w_rot = *pose.rotation();
    let mut pose_rot = Vector3::zeros();
    let mut pose_trans = Vector3::zeros();
    for (s, g) in splats.iter().zip(&sg) {
        let gauss = map.get(s.index);
        let row = &mut grads.gaussians[s.index];

        // conic -> 2D covariance
        let (a, b, c) = (s.cov[(0, 0)], s.cov[(0, 1)], s.cov[(1, 1)]);
        let det = a * c - b * b;
        let inv_det2 = 1.0 / (det * det);
        let [ga, gb, gc] = g.conic;
        let d_a = inv_det2 * (-c * c * ga + b * c * gb - b * b * gc);
        let d_b = inv_det2 * (2.0 * b * c * ga - (a * c + b * b) * gb + 2.0 * a * b * gc);
        let d_c = inv_det2 * (-b * b * ga + a * b * gb - a * a * gc);
        let g_cov2 = Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);

        // 2D covariance -> camera covariance and projection Jacobian
        let p_c = s.p_cam;
        let q = gauss.rotation;
        let q_norm = q.norm();
        let q_hat = q / q_norm;
        let rot = quat_to_matrix(&q_hat);
        let scale = gauss.log_scale.map(f64::exp);
        let cov3 = covariance_from_scale(&q, &scale);
        let cam_cov = w_rot * cov3 * w_rot.transpose();
        let jac = projection_jacobian(&p_c, k);
        let g_cam_cov = jac.transpose() * g_cov2 * jac;
        let g_jac = g_cov2 * jac * cam_cov * 2.0;

        // projection Jacobian, mean and depth -> camera-frame point
        let iz = 1.0 / p_c.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut g_pc = Vector3::zeros();
        g_pc.x += g_jac[(0, 2)] * (-k.fx * iz2);
        g_pc.y += g_jac[(1, 2)] * (-k.fy * iz2);
        g_pc.z += g_jac[(0, 0)] * (-k.fx * iz2)
            + g_jac[(0, 2)] * (2.0 * k.fx * p_c.x * iz3)
            + g_jac[(1, 1)] * (-k.fy * iz2)
            + g_jac[(1, 2)] * (2.0 * k.fy * p_c.y * iz3);
        g_pc.x += g.mean.x * k.fx * iz;
        g_pc.z += g.mean.x * (-k.fx * p_c.x * iz2);
        g_pc.y += g.mean.y * k.fy * iz;
        g_pc.z += g.mean.y * (-k.fy * p_c.y * iz2);
        g_pc.z += g.depth;

        // camera covariance -> W and world covariance
        let g_w = g_cam_cov * w_rot * cov3 * 2.0;
        let g_cov3 = w_rot.transpose() * g_cam_cov * w_rot;

        // pose: point term [I | -p_c^x] plus the rotation term through W's columns
        pose_trans += g_pc;
        pose_rot += p_c.cross(&g_pc);
        for i in 0..3 {
            let col: Vector3<f64> = w_rot.column(i).into_owned();
            let gcol: Vector3<f64> = g_w.column(i).into_owned();
            pose_rot += col.cross(&gcol);
        }

        // world position
        let g_pos = w_rot.transpose() * g_pc;

        // world covariance -> rotation and scale
        let scale_sq = Matrix3::from_diagonal(&scale.component_mul(&scale));
        let g_rot = g_cov3 * rot * scale_sq * 2.0;
        let rtgr = rot.transpose() * g_cov3 * rot;
        let g_scale = Vector3::from_fn(|i, _| 2.0 * scale[i] * rtgr[(i, i)]);
        let g_log_scale = g_scale.component_mul(&scale);

        let g_qhat = quat_grad(&q_hat, &g_rot);
        let g_q = (g_qhat - q_hat * q_hat.dot(&g_qhat)) / q_norm;

        let sig_o = sigmoid(gauss.opacity_logit);
        let g_opacity_logit = g.opacity * sig_o * (1.0 - sig_o);

        // Straight-through mask: dB/db = sigmoid'(b); B scales both opacity and scale.
        let g_mask = if map.masks_discarded() {
            0.0
        } else {
            let d_b = g.opacity * sig_o + g_scale.dot(&scale);
            let sig_b = sigmoid(gauss.mask_logit);
            d_b * sig_b * (1.0 - sig_b)
        };

        row[param::POSITION..param::POSITION + 3].copy_from_slice(g_pos.as_slice());
        row[param::ROTATION..param::ROTATION + 4].copy_from_slice(g_q.as_slice());
        row[param::LOG_SCALE..param::LOG_SCALE + 3].copy_from_slice(g_log_scale.as_slice());
        row[param::OPACITY] = g_opacity_logit;
        row[param::COLOR..param::COLOR + 3].copy_from_slice(g.color.as_slice());
        row[param::MASK] = g_mask;
        grads.mean2d[s.index] = g.mean;
    }
    grads.pose = Tangent::new(pose_trans, pose_rot);
    Ok(grads)
}

/// Gradient w.r.t. a normalized `(w, x, y, z)` quaternion given the gradient w.r.t. its rotation matrix.
fn quat_grad(q: &Vector4<f64>, gr: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| gr[(r, c)];
    Vector4::new(
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    )
}
