//! Joint optimization of window poses and the Gaussian map, map growth from
//! RGB-D keyframes, periodic color refinement and the final scene refinement.

use std::collections::BTreeMap;

use nalgebra::{Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compaction::{
    densify_and_prune, depth_l1_with_grad, discard_masks, l1_loss_with_grad, mask_loss,
    photometric_ssim_loss_with_grad, prune, DensifyConfig, GradientAccumulator, MaskConfig,
    MutationReport,
};
use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::lie::{Pose, Tangent};
use crate::optim::{AdamConfig, AdamMoments};
use crate::raster::{render, render_backward, RenderGradients, RenderSettings};
use crate::scene::{
    logit, param, CameraIntrinsics, Frame, Gaussian, GaussianId, GaussianMap, PARAM_COUNT,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub mask: f64,
    pub pose_rotation: f64,
    pub pose_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            mask: 1e-2,
            pose_rotation: 1e-3,
            pose_translation: 3e-4,
        }
    }
}

impl LearningRates {
    pub fn gaussian_rates(&self, scene_extent: f64) -> [f64; PARAM_COUNT] {
        let mut lrs = [0.0; PARAM_COUNT];
        lrs[param::POSITION..param::POSITION + 3].fill(self.position * scene_extent);
        lrs[param::ROTATION..param::ROTATION + 4].fill(self.rotation);
        lrs[param::LOG_SCALE..param::LOG_SCALE + 3].fill(self.scale);
        lrs[param::OPACITY] = self.opacity;
        lrs[param::COLOR..param::COLOR + 3].fill(self.color);
        lrs[param::MASK] = self.mask;
        lrs
    }

    fn pose_rates(&self) -> [f64; 6] {
        let (t, r) = (self.pose_translation, self.pose_rotation);
        [t, t, t, r, r, r]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    /// Random past information keyframes added to each iteration.
    pub history: usize,
    pub iterations_per_update: usize,
    pub lr: LearningRates,
    pub refinement_iterations: usize,
    pub insertion_stride: usize,
    /// Weight of the alpha-normalized depth L1 added per view (0 disables).
    pub depth_weight: f64,
    /// Map updates between color refinement passes (0 disables).
    pub color_refinement_interval: usize,
    pub color_refinement_iterations: usize,
    pub mask: MaskConfig,
    pub densify: DensifyConfig,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            history: 2,
            iterations_per_update: 50,
            lr: LearningRates::default(),
            refinement_iterations: 2000,
            insertion_stride: 4,
            depth_weight: 1.0,
            color_refinement_interval: 10,
            color_refinement_iterations: 10,
            mask: MaskConfig::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.insertion_stride == 0 || self.densify.interval == 0 {
            return Err(SlamError::Config(format!(
                "invalid mapping config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Optimizer bookkeeping that outlives a single map update.
#[derive(Clone, Debug)]
pub struct MapperState {
    rng: ChaCha8Rng,
    acc: GradientAccumulator,
    pose_moments: BTreeMap<usize, (AdamMoments<6>, u64)>,
    iterations: usize,
    updates: usize,
    /// Length scale for the position learning rate.
    pub scene_extent: f64,
    /// Frame index whose pose is held fixed to anchor the gauge.
    pub gauge_frame: Option<usize>,
}

impl MapperState {
    pub fn new(seed: u64) -> Self {
        MapperState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            acc: GradientAccumulator::default(),
            pose_moments: BTreeMap::new(),
            iterations: 0,
            updates: 0,
            scene_extent: 1.0,
            gauge_frame: None,
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn sync_accumulator(&mut self, n: usize) {
        if self.acc.len() != n {
            self.acc.resize(n);
        }
    }
}

/// Back-projects every `stride`-th pixel with valid depth that the map does not yet cover.
pub fn insert_gaussians(
    map: &mut GaussianMap,
    frame: &Frame,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    stride: usize,
) -> Result<usize> {
    let Some(depth) = &frame.depth else {
        return Ok(0);
    };
    frame.validate(k)?;
    let stride = stride.max(1);
    let alpha = render(map, &frame.pose, k, settings).alpha;
    let world_from_cam = frame.pose.inverse();
    let mut added = 0;
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            let d = depth.get(x, y, 0);
            if d.is_nan() || d <= 0.0 || alpha.get(x, y, 0) >= 0.5 {
                continue;
            }
            let p_c = k.back_project(x as f64, y as f64, d);
            let scale = (d / k.fx * stride as f64 / 2.0).clamp(1e-3, 0.5);
            let rgb = frame.rgb.pixel(x, y);
            map.push(Gaussian {
                id: GaussianId(0),
                position: world_from_cam.transform_point(&p_c),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::repeat(scale.ln()),
                opacity_logit: 0.0,
                color: Vector3::new(rgb[0], rgb[1], rgb[2]),
                mask_logit: logit(0.99),
            });
            added += 1;
        }
    }
    Ok(added)
}

/// One view entering the mapping loss.
pub struct MappingView<'a> {
    pub rgb: &'a Image,
    /// Metric depth; contributes only when the depth weight is positive.
    pub depth: Option<&'a Image>,
    pub pose: Pose,
    pub optimize_pose: bool,
}

pub struct MappingLoss {
    pub loss: f64,
    pub photometric: f64,
    pub depth: f64,
    pub regularizer: f64,
    pub gaussians: Vec<[f64; PARAM_COUNT]>,
    /// Zero for views whose pose is frozen.
    pub poses: Vec<Tangent>,
    /// Per-view screen-space mean gradients, for densification statistics.
    pub mean2d: Vec<Vec<nalgebra::Vector2<f64>>>,
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

/// `beta * sum_j |S_j - S_mean|_1` with `S = exp(log_scale)`, and its gradient w.r.t.
/// log-scales (the mean's dependence on every scale included).
pub fn scale_regularizer(map: &GaussianMap, beta: f64) -> (f64, Vec<Vector3<f64>>) {
    let n = map.len();
    if n == 0 || beta == 0.0 {
        return (0.0, vec![Vector3::zeros(); n]);
    }
    let scales: Vec<Vector3<f64>> = map.gaussians().iter().map(Gaussian::scale).collect();
    let mean = scales.iter().sum::<Vector3<f64>>() / n as f64;
    let signs: Vec<Vector3<f64>> = scales.iter().map(|s| (s - mean).map(sign)).collect();
    let total: f64 = scales.iter().map(|s| (s - mean).abs().sum()).sum();
    let mean_sign = signs.iter().sum::<Vector3<f64>>() / n as f64;
    let grads = scales
        .iter()
        .zip(&signs)
        .map(|(s, sg)| beta * (sg - mean_sign).component_mul(s))
        .collect();
    (beta * total, grads)
}

/// Sum over views of the mean L1 color error and weighted depth error plus the scale
/// regularizer, with gradients.
pub fn mapping_loss(
    map: &GaussianMap,
    views: &[MappingView<'_>],
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    beta: f64,
    depth_weight: f64,
) -> Result<MappingLoss> {
    let mut total = RenderGradients::zeros(map.len());
    let mut photometric = 0.0;
    let mut depth = 0.0;
    let mut poses = Vec::with_capacity(views.len());
    let mut mean2d = Vec::with_capacity(views.len());
    let zeros = Image::new(k.width, k.height, 1);
    for v in views {
        let out = render(map, &v.pose, k, settings);
        let (l1, dcolor) = l1_loss_with_grad(&out.color, v.rgb)?;
        photometric += l1;
        let (dd, da) = match v.depth.filter(|_| depth_weight > 0.0) {
            Some(gt) => {
                let (l, mut dd, mut da) = depth_l1_with_grad(&out.depth, &out.alpha, gt)?;
                depth += depth_weight * l;
                dd.data_mut().iter_mut().for_each(|x| *x *= depth_weight);
                da.data_mut().iter_mut().for_each(|x| *x *= depth_weight);
                (dd, da)
            }
            None => (zeros.clone(), zeros.clone()),
        };
        let g = render_backward(map, &v.pose, k, settings, &out, &dcolor, &dd, &da)?;
        poses.push(if v.optimize_pose {
            g.pose
        } else {
            Tangent::zero()
        });
        mean2d.push(g.mean2d.clone());
        total.accumulate(&g);
    }
    let (regularizer, reg_grads) = scale_regularizer(map, beta);
    for (row, rg) in total.gaussians.iter_mut().zip(&reg_grads) {
        for i in 0..3 {
            row[param::LOG_SCALE + i] += rg[i];
        }
    }
    Ok(MappingLoss {
        loss: photometric + depth + regularizer,
        photometric,
        depth,
        regularizer,
        gaussians: total.gaussians,
        poses,
        mean2d,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MapUpdateReport {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub gaussians: usize,
    pub mutations: Vec<MutationReport>,
}

/// Runs `iterations_per_update` Adam steps over the window frames plus random history frames.
///
/// `window` and the history pool index into `keyframes`; window poses other than
/// the gauge frame are optimized in place.
#[allow(clippy::too_many_arguments)]
pub fn map_update(
    map: &mut GaussianMap,
    keyframes: &mut [Frame],
    window: &[usize],
    state: &mut MapperState,
    cfg: &MappingConfig,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<MapUpdateReport> {
    if window.is_empty() {
        return Err(SlamError::contract("map update with an empty window"));
    }
    if let Some(&bad) = window.iter().find(|&&i| i >= keyframes.len()) {
        return Err(SlamError::contract(format!(
            "window index {bad} out of range"
        )));
    }
    let adam = AdamConfig::default();
    let history_pool: Vec<usize> = (0..keyframes.len())
        .filter(|i| !window.contains(i))
        .collect();
    let mut report = MapUpdateReport {
        best_loss: f64::INFINITY,
        ..MapUpdateReport::default()
    };
    for it in 0..cfg.iterations_per_update {
        state.sync_accumulator(map.len());
        let n_hist = cfg.history.min(history_pool.len());
        let mut selected: Vec<usize> = window.to_vec();
        if n_hist > 0 {
            selected.extend(
                sample(&mut state.rng, history_pool.len(), n_hist)
                    .into_iter()
                    .map(|i| history_pool[i]),
            );
        }
        let views: Vec<MappingView> = selected
            .iter()
            .enumerate()
            .map(|(slot, &i)| MappingView {
                rgb: &keyframes[i].rgb,
                depth: keyframes[i].depth.as_ref(),
                pose: keyframes[i].pose,
                optimize_pose: slot < window.len() && state.gauge_frame != Some(keyframes[i].index),
            })
            .collect();
        let eval = mapping_loss(map, &views, k, settings, cfg.mask.beta, cfg.depth_weight)?;
        drop(views);
        if it == 0 {
            report.initial_loss = eval.loss;
        }
        report.final_loss = eval.loss;
        report.best_loss = report.best_loss.min(eval.loss);
        for m in &eval.mean2d {
            state.acc.add(m);
        }
        map.adam_update(
            &eval.gaussians,
            &cfg.lr.gaussian_rates(state.scene_extent),
            &adam,
        )?;
        for (slot, &i) in selected.iter().enumerate().take(window.len()) {
            let g = eval.poses[slot];
            if g.0 == nalgebra::Vector6::zeros() {
                continue;
            }
            let frame = &mut keyframes[i];
            let (moments, t) = state.pose_moments.entry(frame.index).or_default();
            *t += 1;
            let step = moments.delta(&g.0.into(), &cfg.lr.pose_rates(), *t, &adam);
            frame.pose = frame.pose.retract(&Tangent::from_slice(&step));
        }
        state.iterations += 1;
        report.iterations += 1;
        if state.iterations.is_multiple_of(cfg.densify.interval) {
            let r = densify_and_prune(map, &state.acc, &cfg.densify, &mut state.rng)?;
            state.acc.reset(map.len());
            report.mutations.push(r);
        }
    }
    map.check_invariants()?;
    state.updates += 1;
    report.gaussians = map.len();
    Ok(report)
}

/// Adam steps on the photometric + SSIM + mask loss over random keyframes, poses frozen.
#[allow(clippy::too_many_arguments)]
fn refine(
    map: &mut GaussianMap,
    keyframes: &[Frame],
    state: &mut MapperState,
    cfg: &MappingConfig,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    iterations: usize,
    fixed_frame: Option<usize>,
) -> Result<()> {
    if keyframes.is_empty() {
        return Ok(());
    }
    let adam = AdamConfig::default();
    let zeros = Image::new(k.width, k.height, 1);
    let lrs = cfg.lr.gaussian_rates(state.scene_extent);
    for _ in 0..iterations {
        let i = fixed_frame.unwrap_or_else(|| state.rng.random_range(0..keyframes.len()));
        let frame = &keyframes[i];
        let out = render(map, &frame.pose, k, settings);
        let (_, dcolor) =
            photometric_ssim_loss_with_grad(&out.color, &frame.rgb, cfg.mask.lambda1)?;
        let mut g = render_backward(map, &frame.pose, k, settings, &out, &dcolor, &zeros, &zeros)?;
        if cfg.mask.lambda2 > 0.0 && !map.masks_discarded() {
            let (_, mg) = mask_loss(map);
            for (row, m) in g.gaussians.iter_mut().zip(mg) {
                row[param::MASK] += cfg.mask.lambda2 * m;
            }
        }
        map.adam_update(&g.gaussians, &lrs, &adam)?;
    }
    Ok(())
}

/// A short refinement pass on one random keyframe.
pub fn color_refinement(
    map: &mut GaussianMap,
    keyframes: &[Frame],
    state: &mut MapperState,
    cfg: &MappingConfig,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<()> {
    if keyframes.is_empty() {
        return Ok(());
    }
    let i = state.rng.random_range(0..keyframes.len());
    refine(
        map,
        keyframes,
        state,
        cfg,
        k,
        settings,
        cfg.color_refinement_iterations,
        Some(i),
    )
}

/// Long refinement over random keyframes, then pruning (no densification), then mask discard.
pub fn final_refinement(
    map: &mut GaussianMap,
    keyframes: &[Frame],
    state: &mut MapperState,
    cfg: &MappingConfig,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<MutationReport> {
    refine(
        map,
        keyframes,
        state,
        cfg,
        k,
        settings,
        cfg.refinement_iterations,
        None,
    )?;
    let report = prune(map, &cfg.densify);
    state.acc.reset(map.len());
    discard_masks(map)?;
    map.check_invariants()?;
    Ok(report)
}
