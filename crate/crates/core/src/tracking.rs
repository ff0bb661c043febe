//! Direct photometric pose tracking against the rendered map.

use serde::{Deserialize, Serialize};

use crate::compaction::depth_l1_with_grad;
use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::lie::{Pose, Tangent};
use crate::optim::{AdamConfig, AdamMoments};
use crate::raster::{render, render_backward, RenderOutput, RenderSettings};
use crate::scene::{CameraIntrinsics, Frame, GaussianMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub iterations: usize,
    pub rotation_lr: f64,
    pub translation_lr: f64,
    pub convergence_tol: f64,
    pub depth_weight: f64,
    /// Halve both rates after this many iterations without a new best loss (0 disables).
    pub patience: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            iterations: 60,
            rotation_lr: 3e-3,
            translation_lr: 1e-3,
            convergence_tol: 1e-5,
            depth_weight: 1.0,
            patience: 4,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.rotation_lr > 0.0 && self.translation_lr > 0.0) {
            return Err(SlamError::Config(format!(
                "invalid tracking config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss value, upstream image gradients and the render they came from.
pub struct TrackingEval {
    pub loss: f64,
    pub render: RenderOutput,
    pub dl_dcolor: Image,
    pub dl_ddepth: Image,
    pub dl_dalpha: Image,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Alpha-weighted L1 on color (per-pixel sum over channels, mean over pixels)
/// plus `depth_weight` times the alpha-weighted L1 between the alpha-normalized
/// rendered depth and valid ground-truth depth.
pub fn tracking_residuals(
    map: &GaussianMap,
    pose: &Pose,
    frame: &Frame,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    depth_weight: f64,
) -> Result<TrackingEval> {
    frame.validate(k)?;
    let render = render(map, pose, k, settings);
    if render.alpha.data().iter().all(|&a| a == 0.0) {
        return Err(SlamError::TrackingLost);
    }
    let (w, h) = (k.width, k.height);
    let inv_p = 1.0 / (w * h) as f64;
    let mut dl_dcolor = Image::new(w, h, 3);
    let mut dl_ddepth = Image::new(w, h, 1);
    let mut dl_dalpha = Image::new(w, h, 1);
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = render.alpha.get(x, y, 0);
            let mut abs_sum = 0.0;
            for c in 0..3 {
                let r = render.color.get(x, y, c) - frame.rgb.get(x, y, c);
                abs_sum += r.abs();
                dl_dcolor.set(x, y, c, inv_p * a * sign(r));
            }
            loss += inv_p * a * abs_sum;
            dl_dalpha.set(x, y, 0, inv_p * abs_sum);
        }
    }
    if let Some(depth) = frame.depth.as_ref().filter(|_| depth_weight > 0.0) {
        let (l, dd, da) = depth_l1_with_grad(&render.depth, &render.alpha, depth)?;
        loss += depth_weight * l;
        dl_ddepth = dd;
        dl_ddepth
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= depth_weight);
        for (a, b) in dl_dalpha.data_mut().iter_mut().zip(da.data()) {
            *a += depth_weight * b;
        }
    }
    Ok(TrackingEval {
        loss,
        render,
        dl_dcolor,
        dl_ddepth,
        dl_dalpha,
    })
}

/// Tracking loss and its gradient w.r.t. a left perturbation of `pose`.
pub fn tracking_loss(
    map: &GaussianMap,
    pose: &Pose,
    frame: &Frame,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    depth_weight: f64,
) -> Result<(f64, Tangent)> {
    let ev = tracking_residuals(map, pose, frame, k, settings, depth_weight)?;
    let grads = render_backward(
        map,
        pose,
        k,
        settings,
        &ev.render,
        &ev.dl_dcolor,
        &ev.dl_ddepth,
        &ev.dl_dalpha,
    )?;
    Ok((ev.loss, grads.pose))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingResult {
    #[serde(skip)]
    pub pose: Pose,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best loss after each iteration; non-increasing.
    pub best_trace: Vec<f64>,
}

/// Adam on the pose tangent starting from `initial`, returning the best pose seen.
pub fn track_keyframe(
    map: &GaussianMap,
    frame: &Frame,
    k: &CameraIntrinsics,
    initial: &Pose,
    cfg: &TrackingConfig,
    settings: &RenderSettings,
) -> Result<TrackingResult> {
    cfg.validate()?;
    let adam = AdamConfig::default();
    let mut moments = AdamMoments::<6>::default();
    let mut lr_scale = 1.0;
    let mut pose = *initial;
    let mut best = (f64::INFINITY, pose);
    let mut initial_loss = None;
    let mut since_best = 0;
    let mut best_trace = Vec::with_capacity(cfg.iterations);
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=cfg.iterations {
        iterations = t;
        let (loss, grad) = tracking_loss(map, &pose, frame, k, settings, cfg.depth_weight)?;
        initial_loss.get_or_insert(loss);
        if loss < best.0 {
            best = (loss, pose);
            since_best = 0;
        } else {
            since_best += 1;
        }
        best_trace.push(best.0);
        if cfg.patience > 0 && since_best >= cfg.patience {
            lr_scale *= 0.5;
            pose = best.1;
            since_best = 0;
            continue;
        }
        let (tl, rl) = (cfg.translation_lr * lr_scale, cfg.rotation_lr * lr_scale);
        let lrs = [tl, tl, tl, rl, rl, rl];
        let g: [f64; 6] = grad.0.into();
        let step = moments.delta(&g, &lrs, t as u64, &adam);
        let step = Tangent::from_slice(&step);
        if step.norm() < cfg.convergence_tol {
            converged = true;
            break;
        }
        pose = pose.retract(&step);
    }
    Ok(TrackingResult {
        pose: best.1,
        initial_loss: initial_loss.unwrap_or(0.0),
        best_loss: best.0,
        iterations,
        converged,
        best_trace,
    })
}
