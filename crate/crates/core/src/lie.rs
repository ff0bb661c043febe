//! Rigid-body poses on SE(3) and their tangent space.
//!
//! Tangent vectors are ordered `[translation (3), rotation (3)]` everywhere in
//! the crate. Perturbations are applied on the left: `T <- Exp(tau) * T`.

use std::fmt;

use nalgebra::{Matrix3, Matrix3x6, SMatrix, UnitQuaternion, Vector3, Vector6};

/// Angles below this use Taylor expansions of the Rodrigues coefficients.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rotation angles within this distance of pi are reported as near-singular by `log`.
pub const NEAR_PI: f64 = 1e-9;

/// A 6-dof tangent vector `[rho, omega]`: translation part in meters, rotation part in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Tangent(pub Vector6<f64>);

impl Tangent {
    pub fn zero() -> Self {
        Tangent(Vector6::zeros())
    }

    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Tangent(Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Tangent(Vector6::from_column_slice(v))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Outcome of [`Pose::log_with_status`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogStatus {
    Regular,
    /// Rotation angle within [`NEAR_PI`] of pi; the axis sign is ambiguous.
    NearPi,
}

/// Camera-from-world rigid transform.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        write!(
            f,
            "Pose(t: [{:.6}, {:.6}, {:.6}], q: [w {:.6}, x {:.6}, y {:.6}, z {:.6}])",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, re-orthonormalizing it.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation as a unit quaternion with non-negative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates, assuming `self` is camera-from-world.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Left-multiplicative retraction `Exp(tau) * self`, re-orthonormalized.
    pub fn retract(&self, tau: &Tangent) -> Pose {
        let p = exp(tau).compose(self);
        Pose {
            rotation: orthonormalize(&p.rotation),
            translation: p.translation,
        }
    }

    pub fn log(&self) -> Tangent {
        self.log_with_status().0
    }

    pub fn log_with_status(&self) -> (Tangent, LogStatus) {
        log(self)
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

/// Skew-symmetric matrix with `skew(v) * w == v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Gram-Schmidt on the columns, keeping the first column's direction.
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let x = m.column(0).normalize();
    let y0 = m.column(1) - x * x.dot(&m.column(1));
    let y = y0.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Rodrigues coefficients `sin(t)/t`, `(1-cos(t))/t^2`, `(t-sin(t))/t^3`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let half = (0.5 * theta).sin();
        (
            theta.sin() / theta,
            2.0 * half * half / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    }
}

/// SE(3) exponential: Rodrigues rotation and V-matrix translation.
pub fn exp(tau: &Tangent) -> Pose {
    let rho = tau.translation();
    let omega = tau.rotation();
    let theta = omega.norm();
    let (a, b, c) = rodrigues_coeffs(theta);
    let k = skew(&omega);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose {
        rotation,
        translation: v * rho,
    }
}

/// SE(3) logarithm.
pub fn log(pose: &Pose) -> (Tangent, LogStatus) {
    let r = &pose.rotation;
    let skew_part = vee(&(r - r.transpose())) * 0.5;
    let sin_theta = skew_part.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    let mut status = LogStatus::Regular;
    let omega = if theta < SMALL_ANGLE {
        skew_part * (1.0 + theta * theta / 6.0)
    } else if std::f64::consts::PI - theta < 1e-4 {
        // sin(theta) is too small to divide by; recover the axis from the symmetric part.
        if std::f64::consts::PI - theta < NEAR_PI {
            status = LogStatus::NearPi;
        }
        let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
        let mut best = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<f64> = sym.column(best).into_owned();
        axis /= axis.norm().max(f64::MIN_POSITIVE);
        if axis.dot(&skew_part) < 0.0 {
            axis = -axis;
        }
        axis * theta
    } else {
        skew_part * (theta / sin_theta)
    };

    let k = skew(&omega);
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0)
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        let d = (1.0 - a / (2.0 * b)) / (theta * theta);
        Matrix3::identity() - k * 0.5 + k * k * d
    };
    (Tangent::new(v_inv * pose.translation, omega), status)
}

/// Jacobian of the camera-frame point w.r.t. a left pose perturbation: `[I | -skew(p_c)]`.
pub fn point_pose_jacobian(p_c: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p_c)));
    j
}

/// Jacobian of the stacked columns of `W` (rows `3i..3i+3` hold column `i`) w.r.t. a
/// left pose perturbation. Block `i` is `[0 | skew(W_i)^T]`; the translation
/// columns are zero.
pub fn rotation_pose_jacobian(w: &Matrix3<f64>) -> SMatrix<f64, 9, 6> {
    let mut j = SMatrix::<f64, 9, 6>::zeros();
    for i in 0..3 {
        let col: Vector3<f64> = w.column(i).into_owned();
        j.fixed_view_mut::<3, 3>(3 * i, 3)
            .copy_from(&skew(&col).transpose());
    }
    j
}
