//! Learned binary masks, the photometric/SSIM/mask losses and densification.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::image::Image;
use crate::scene::{quat_to_matrix, sigmoid, GaussianMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub epsilon: f64,
    /// SSIM weight in the photometric loss.
    pub lambda1: f64,
    /// Mask loss weight.
    pub lambda2: f64,
    /// Scale regularizer weight used by mapping.
    pub beta: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            epsilon: 0.01,
            lambda1: 0.2,
            lambda2: 5e-4,
            beta: 1e-4,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.epsilon < 1.0
            && (0.0..=1.0).contains(&self.lambda1)
            && self.lambda2 >= 0.0
            && self.beta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid mask config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskValue {
    /// Binary value used by rendering.
    pub forward: f64,
    /// Straight-through derivative `dB/db`.
    pub gradient_factor: f64,
}

/// `B = 1[sigmoid(b) >= epsilon]` in the forward pass, `sigmoid'(b)` in the backward pass.
pub fn mask_value(b: f64, epsilon: f64) -> MaskValue {
    let s = sigmoid(b);
    MaskValue {
        forward: if s >= epsilon { 1.0 } else { 0.0 },
        gradient_factor: s * (1.0 - s),
    }
}

/// Mean of `sigmoid(mask_logit)` and its gradient per Gaussian.
pub fn mask_loss(map: &GaussianMap) -> (f64, Vec<f64>) {
    let n = map.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let grads = map
        .gaussians()
        .iter()
        .map(|g| {
            let s = sigmoid(g.mask_logit);
            total += s;
            inv * s * (1.0 - s)
        })
        .collect();
    (total * inv, grads)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur of one plane with edge-replicated borders.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + clamp_index(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp_index(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur`]: scatters instead of gathers.
fn blur_adjoint(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[clamp_index(y as isize + j as isize - r, h) * w + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = tmp[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + clamp_index(x as isize + j as isize - r, w)] += kv * v;
            }
        }
    }
    out
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    let c = img.channels();
    (0..c)
        .map(|ch| img.data().iter().skip(ch).step_by(c).copied().collect())
        .collect()
}

/// Mean SSIM over pixels and channels, with `dSSIM/da` when requested.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b, "ssim")?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let n = (w * h * c) as f64;
    let k = ssim_kernel();
    let pa = planes(a);
    let pb = planes(b);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, c));
    for ch in 0..c {
        let x = &pa[ch];
        let y = &pb[ch];
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_x = blur(x, w, h, &k);
        let mu_y = blur(y, w, h, &k);
        let exx = blur(&sq(x, x), w, h, &k);
        let eyy = blur(&sq(y, y), w, h, &k);
        let exy = blur(&sq(x, y), w, h, &k);
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (exx[i] - mx * mx) + (eyy[i] - my * my) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let scale = 1.0 / n;
                // Paired so each bracket is exactly zero when the images match.
                d_mu[i] =
                    scale * s * ((2.0 * my / a1 - 2.0 * mx / b1) + (2.0 * mx / b2 - 2.0 * my / a2));
                d_exx[i] = -scale * s / b2;
                d_exy[i] = scale * 2.0 * s / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = blur_adjoint(&d_mu, w, h, &k);
            let g_xx = blur_adjoint(&d_exx, w, h, &k);
            let g_xy = blur_adjoint(&d_exy, w, h, &k);
            for i in 0..w * h {
                g.data_mut()[i * c + ch] = g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i];
            }
        }
    }
    Ok((total / n, grad))
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), edge-replicated borders.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// Mean absolute difference over pixels and channels, with its subgradient (0 at equality).
pub fn l1_loss_with_grad(rendered: &Image, gt: &Image) -> Result<(f64, Image)> {
    rendered.check_same_shape(gt, "l1 loss")?;
    let n = rendered.data().len() as f64;
    let mut grad = Image::new(rendered.width(), rendered.height(), rendered.channels());
    let mut total = 0.0;
    for ((g, r), t) in grad
        .data_mut()
        .iter_mut()
        .zip(rendered.data())
        .zip(gt.data())
    {
        let d = r - t;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// Mean over valid (positive) ground-truth pixels of `alpha * |depth / alpha - gt|`,
/// computed as `|depth - alpha * gt|`, with gradients w.r.t. rendered depth and alpha.
pub fn depth_l1_with_grad(depth: &Image, alpha: &Image, gt: &Image) -> Result<(f64, Image, Image)> {
    depth.check_same_shape(gt, "depth loss")?;
    alpha.check_same_shape(gt, "depth loss")?;
    let mut d_depth = Image::new(gt.width(), gt.height(), 1);
    let mut d_alpha = Image::new(gt.width(), gt.height(), 1);
    let valid = gt.data().iter().filter(|&&d| d > 0.0).count();
    if valid == 0 {
        return Ok((0.0, d_depth, d_alpha));
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    for (i, &g) in gt.data().iter().enumerate() {
        if g <= 0.0 {
            continue;
        }
        let r = depth.data()[i] - alpha.data()[i] * g;
        total += r.abs();
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_depth.data_mut()[i] = inv * s;
        d_alpha.data_mut()[i] = -inv * g * s;
    }
    Ok((total * inv, d_depth, d_alpha))
}

/// `(1 - lambda1) * L1 + lambda1 * (1 - SSIM)`.
pub fn photometric_ssim_loss(rendered: &Image, gt: &Image, lambda1: f64) -> Result<f64> {
    let (l1, _) = l1_loss_with_grad(rendered, gt)?;
    let s = if lambda1 > 0.0 {
        ssim(rendered, gt)?
    } else {
        1.0
    };
    Ok((1.0 - lambda1) * l1 + lambda1 * (1.0 - s))
}

/// Photometric loss and its gradient w.r.t. the rendered image.
pub fn photometric_ssim_loss_with_grad(
    rendered: &Image,
    gt: &Image,
    lambda1: f64,
) -> Result<(f64, Image)> {
    let (l1, mut grad) = l1_loss_with_grad(rendered, gt)?;
    for g in grad.data_mut() {
        *g *= 1.0 - lambda1;
    }
    let mut loss = (1.0 - lambda1) * l1;
    if lambda1 > 0.0 {
        let (s, gs) = ssim_with_grad(rendered, gt)?;
        loss += lambda1 * (1.0 - s);
        for (g, v) in grad.data_mut().iter_mut().zip(gs.data()) {
            *g -= lambda1 * v;
        }
    }
    Ok((loss, grad))
}

/// Photometric loss plus `lambda2` times the mask loss.
pub fn total_scene_loss(
    rendered: &Image,
    gt: &Image,
    map: &GaussianMap,
    cfg: &MaskConfig,
) -> Result<f64> {
    let photo = photometric_ssim_loss(rendered, gt, cfg.lambda1)?;
    let mask = if cfg.lambda2 > 0.0 {
        mask_loss(map).0
    } else {
        0.0
    };
    Ok(photo + cfg.lambda2 * mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    pub opacity_threshold: f64,
    /// Largest scale (meters) below which a Gaussian is cloned rather than split.
    pub small_scale: f64,
    /// Mapping iterations between densification passes.
    pub interval: usize,
    pub split_factor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            opacity_threshold: 0.05,
            small_scale: 0.01,
            interval: 150,
            split_factor: 1.6,
        }
    }
}

/// Running mean of each Gaussian's screen-space positional gradient norm.
#[derive(Clone, Debug, Default)]
pub struct GradientAccumulator {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl GradientAccumulator {
    pub fn new(n: usize) -> Self {
        GradientAccumulator {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Records one view; only Gaussians with a nonzero gradient count as observed.
    pub fn add(&mut self, mean2d: &[nalgebra::Vector2<f64>]) {
        for ((s, c), g) in self.sum.iter_mut().zip(&mut self.count).zip(mean2d) {
            let n = g.norm();
            if n > 0.0 {
                *s += n;
                *c += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }

    /// Grows to `n` rows; new rows start empty.
    pub fn resize(&mut self, n: usize) {
        self.sum.resize(n, 0.0);
        self.count.resize(n, 0);
    }

    pub fn reset(&mut self, n: usize) {
        *self = GradientAccumulator::new(n);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationReport {
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub mask_pruned: usize,
}

/// Clones, splits, then prunes. Accumulators must be congruent with the map.
pub fn densify_and_prune<R: Rng + ?Sized>(
    map: &mut GaussianMap,
    acc: &GradientAccumulator,
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<MutationReport> {
    if acc.len() != map.len() {
        return Err(SlamError::contract(format!(
            "{} accumulator rows for {} Gaussians",
            acc.len(),
            map.len()
        )));
    }
    let before = map.len();
    let mut report = MutationReport {
        before,
        ..MutationReport::default()
    };
    let mut split_parents = Vec::new();
    for i in 0..before {
        if acc.mean(i) <= cfg.grad_threshold {
            continue;
        }
        let g = map.get(i).clone();
        if g.scale().max() < cfg.small_scale {
            map.push(g);
            report.cloned += 1;
        } else {
            let rot = quat_to_matrix(&g.rotation.normalize());
            let scale = g.scale();
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let mut child = g.clone();
                child.position = g.position + rot * scale.component_mul(&z);
                child.log_scale = g.log_scale.map(|s| s - cfg.split_factor.ln());
                map.push(child);
            }
            split_parents.push(g.id);
            report.split += 1;
        }
    }
    let mut split_iter = split_parents.into_iter().peekable();
    map.retain(|g| {
        if split_iter.peek() == Some(&g.id) {
            split_iter.next();
            false
        } else {
            true
        }
    });
    prune_into(map, cfg, &mut report);
    Ok(report)
}

/// Pruning alone: low opacity and masked-out Gaussians.
pub fn prune(map: &mut GaussianMap, cfg: &DensifyConfig) -> MutationReport {
    let mut report = MutationReport {
        before: map.len(),
        ..MutationReport::default()
    };
    prune_into(map, cfg, &mut report);
    report
}

fn prune_into(map: &mut GaussianMap, cfg: &DensifyConfig, report: &mut MutationReport) {
    let eps = map.mask_epsilon();
    let discarded = map.masks_discarded();
    let (mut low, mut masked) = (0, 0);
    map.retain(|g| {
        if !discarded && mask_value(g.mask_logit, eps).forward == 0.0 {
            masked += 1;
            false
        } else if g.opacity() < cfg.opacity_threshold {
            low += 1;
            false
        } else {
            true
        }
    });
    report.pruned += low;
    report.mask_pruned += masked;
    report.after = map.len();
}

/// Freezes every mask at 1 and stops optimizing mask logits. Idempotent.
pub fn discard_masks(map: &mut GaussianMap) -> Result<()> {
    if map.masks_discarded() {
        return Ok(());
    }
    let eps = map.mask_epsilon();
    if let Some(g) = map
        .gaussians()
        .iter()
        .find(|g| mask_value(g.mask_logit, eps).forward == 0.0)
    {
        return Err(SlamError::contract(format!(
            "Gaussian {} is masked out; prune before discarding masks",
            g.id.0
        )));
    }
    map.set_masks_discarded();
    Ok(())
}
