//! Trajectory and image quality metrics.

use nalgebra::{Matrix3, Vector3};

use super::dataset::{nearest, TimedPose, ASSOCIATION_TOLERANCE};
use crate::error::{Result, SlamError};
use crate::image::Image;

pub use crate::compaction::ssim;

/// Rotation and translation minimizing `sum |R a_i + t - b_i|^2`.
pub fn rigid_align(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - mb) * (p - ma).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    (r, mb - r * ma)
}

/// Camera centers of `est` and `gt` paired by timestamp within 20 ms.
pub fn associate(est: &[TimedPose], gt: &[TimedPose]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let gt_ts: Vec<f64> = gt.iter().map(|p| p.timestamp).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for e in est {
        if let Some(j) = nearest(&gt_ts, e.timestamp, ASSOCIATION_TOLERANCE) {
            a.push(e.pose.center());
            b.push(gt[j].pose.center());
        }
    }
    (a, b)
}

/// RMSE of camera-center residuals after rigid alignment of `est` onto `gt`, in centimeters.
pub fn ate_rmse(est: &[TimedPose], gt: &[TimedPose]) -> Result<f64> {
    let mut gt_sorted = gt.to_vec();
    gt_sorted.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp));
    let (a, b) = associate(est, &gt_sorted);
    if a.len() < 3 {
        return Err(SlamError::Evaluation(format!(
            "only {} poses associate with ground truth; need 3",
            a.len()
        )));
    }
    let (r, t) = rigid_align(&a, &b);
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (r * p + t - q).norm_squared())
        .sum();
    Ok((sq / a.len() as f64).sqrt() * 100.0)
}

/// Largest distance between two ground-truth camera centers, meters.
pub fn trajectory_diameter(traj: &[TimedPose]) -> f64 {
    let c: Vec<Vector3<f64>> = traj.iter().map(|p| p.pose.center()).collect();
    let mut d: f64 = 0.0;
    for (i, p) in c.iter().enumerate() {
        for q in &c[i + 1..] {
            d = d.max((p - q).norm());
        }
    }
    d
}

pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` for images in [0, 1], capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}
