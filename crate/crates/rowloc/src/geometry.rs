//! Rigid-body geometry: SE(3) transforms and a minimal 6-vector pose.
//!
//! States and measurements use a translation plus axis-angle rotation
//! vector `(t_x, t_y, t_z, r_x, r_y, r_z)`. The axis-angle part is kept
//! minimal (`norm(r) <= pi`), with ties at exactly `pi` broken by making
//! the first nonzero component positive so every rotation has one
//! canonical representation.
//!
//! Rotation exp/log switch to series/symmetric-part branches near the
//! identity and near `pi`, where the closed forms lose precision.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use thiserror::Error;

/// Angle threshold below which `sin(x)/x`-style terms use their series.
const SMALL_ANGLE: f64 = 1e-6;

/// Errors from geometry operations.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// `interp_pose` only interpolates, never extrapolates.
    #[error("interpolation parameter {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
}

/// Minimal pose: translation plus axis-angle rotation with `norm(r) <= pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub t: Vector3<f64>,
    pub r: Vector3<f64>,
}

impl Pose6D {
    /// Builds a pose, normalizing the rotation vector into the canonical
    /// minimal representation.
    pub fn new(t: Vector3<f64>, r: Vector3<f64>) -> Self {
        Self {
            t,
            r: normalize_axis_angle(r),
        }
    }

    /// Identity pose.
    pub fn identity() -> Self {
        Self {
            t: Vector3::zeros(),
            r: Vector3::zeros(),
        }
    }

    /// Packs the pose as `(t_x, t_y, t_z, r_x, r_y, r_z)`.
    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.t);
        v.fixed_rows_mut::<3>(3).copy_from(&self.r);
        v
    }

    /// Unpacks a `(t, r)` 6-vector, normalizing the rotation part.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    /// Homogeneous-matrix form of the pose.
    pub fn to_transform(&self) -> Transform {
        Transform::from_parts(rot_exp(&self.r), self.t)
    }

    /// Applies a local increment: additive on translation, composed on the
    /// right of the rotation. This is the tangent-space convention used by
    /// the solver's Jacobians and updates.
    pub fn boxplus(&self, delta: &Vector6<f64>) -> Self {
        let dt: Vector3<f64> = delta.fixed_rows::<3>(0).into();
        let dr: Vector3<f64> = delta.fixed_rows::<3>(3).into();
        let rot = rot_exp(&self.r) * rot_exp(&dr);
        Self::new(self.t + dt, rot_log(&rot))
    }
}

/// Rigid transform stored as a 4x4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform(Matrix4<f64>);

impl Transform {
    /// Identity transform.
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Assembles a transform from a rotation matrix and a translation.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    /// The underlying homogeneous matrix.
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    /// Rotation block.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into()
    }

    /// Translation column.
    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into()
    }

    /// `self * other` as a rigid composition.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform(self.0 * other.0)
    }

    /// Closed-form rigid inverse `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Transform {
        let rt = self.rotation().transpose();
        Transform::from_parts(rt, -(rt * self.translation()))
    }

    /// Checks orthonormality (`R R^T = I`, `det R = +1`) and the fixed
    /// bottom row within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let ortho = (r * r.transpose() - Matrix3::identity()).norm();
        let det = r.determinant();
        let bottom_ok = self.0[(3, 0)] == 0.0
            && self.0[(3, 1)] == 0.0
            && self.0[(3, 2)] == 0.0
            && self.0[(3, 3)] == 1.0;
        ortho <= tol && (det - 1.0).abs() <= tol && bottom_ok
    }
}

/// Relative transform `a^-1 * b` (motion of `b` expressed in `a`'s frame).
pub fn relative(a: &Transform, b: &Transform) -> Transform {
    a.inverse().compose(b)
}

/// Maps a transform to its minimal 6-vector `(t, log R)`.
pub fn phi(x: &Transform) -> Vector6<f64> {
    let mut v = Vector6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&x.translation());
    v.fixed_rows_mut::<3>(3).copy_from(&rot_log(&x.rotation()));
    v
}

/// Skew-symmetric matrix of `v` (`skew(v) * w == v x w`).
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation from roll, pitch, yaw in the z-y-x convention:
/// `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rot_from_rpy(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_exp(&Vector3::new(0.0, 0.0, yaw))
        * rot_exp(&Vector3::new(0.0, pitch, 0.0))
        * rot_exp(&Vector3::new(roll, 0.0, 0.0))
}

/// Roll, pitch, yaw of a rotation in the z-y-x convention. Away from the
/// `pitch = +-pi/2` singularity the result is unique with pitch in
/// `[-pi/2, pi/2]`; at the singularity roll is pinned to zero.
pub fn rpy_from_rot(rot: &Matrix3<f64>) -> (f64, f64, f64) {
    let sp = (-rot[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if sp.abs() >= 1.0 - 1e-12 {
        return (0.0, pitch, (-rot[(0, 1)]).atan2(rot[(1, 1)]));
    }
    let roll = rot[(2, 1)].atan2(rot[(2, 2)]);
    let yaw = rot[(1, 0)].atan2(rot[(0, 0)]);
    (roll, pitch, yaw)
}

/// Rodrigues exponential of an axis-angle vector.
pub fn rot_exp(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2 by series; truncation error O(t^4).
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(r);
    Matrix3::identity() + k * a + (k * k) * b
}

/// Minimal axis-angle logarithm of a rotation matrix, `norm <= pi`.
///
/// Uses `atan2` of the antisymmetric-part norm against the trace in the
/// generic range, a series near the identity, and the symmetric part to
/// recover the axis when the angle is within ~1e-10 of `pi` where the
/// antisymmetric part vanishes.
pub fn rot_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    let v = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    ) * 0.5;
    let s = v.norm().min(1.0);
    let c = ((rot.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);

    if s < 1e-10 && c < 0.0 {
        // Angle within ~1e-10 of pi: the antisymmetric part no longer
        // resolves the axis; recover it from a a^T = (sym(R) - c I)/(1 - c).
        let theta = std::f64::consts::PI - s.asin();
        let sym = (rot + rot.transpose()) * 0.5;
        let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
        let k = (0..3)
            .max_by(|&i, &j| outer[(i, i)].partial_cmp(&outer[(j, j)]).unwrap())
            .unwrap();
        let mut axis = Vector3::new(outer[(0, k)], outer[(1, k)], outer[(2, k)])
            / outer[(k, k)].max(f64::MIN_POSITIVE).sqrt();
        axis.normalize_mut();
        if s > 1e-14 {
            // The tiny antisymmetric part still carries the sign.
            if axis.dot(&v) < 0.0 {
                axis = -axis;
            }
        } else {
            axis = canonical_sign(axis);
        }
        return axis * theta;
    }

    if c > 0.999_999 {
        // Near identity: theta/sin(theta) ~= 1 + s^2/6 + 7 s^4/360.
        return v * (1.0 + s * s / 6.0 + 7.0 * s.powi(4) / 360.0);
    }

    let theta = s.atan2(c);
    v * (theta / s)
}

/// Flips `a` if needed so its first nonzero component is positive.
fn canonical_sign(a: Vector3<f64>) -> Vector3<f64> {
    for i in 0..3 {
        if a[i] != 0.0 {
            return if a[i] < 0.0 { -a } else { a };
        }
    }
    a
}

/// Wraps an axis-angle vector into the canonical minimal representation:
/// `norm(r) <= pi`, with the sign convention applied at exactly `pi`.
pub fn normalize_axis_angle(r: Vector3<f64>) -> Vector3<f64> {
    let theta = r.norm();
    if theta == 0.0 {
        return r;
    }
    let mut out = r;
    if theta > std::f64::consts::PI {
        let two_pi = 2.0 * std::f64::consts::PI;
        let wrapped = theta % two_pi;
        let axis = r / theta;
        out = if wrapped <= std::f64::consts::PI {
            axis * wrapped
        } else {
            -axis * (two_pi - wrapped)
        };
    }
    if (out.norm() - std::f64::consts::PI).abs() < 1e-12 {
        out = canonical_sign(out);
    }
    out
}

/// Rotation-vector difference `log(exp(r_a)^T exp(r_b))`.
///
/// For coaxial inputs this reduces to a wrapped component-wise
/// subtraction; in general it is the geodesic from `r_a` to `r_b`.
pub fn rot_diff(r_a: &Vector3<f64>, r_b: &Vector3<f64>) -> Vector3<f64> {
    rot_log(&(rot_exp(r_a).transpose() * rot_exp(r_b)))
}

/// Inverse of the right Jacobian of the rotation exponential: maps a
/// right-composed increment to the change of the rotation vector,
/// `log(exp(r) exp(d)) ~= r + rot_right_jacobian_inv(r) * d`.
///
/// Valid for `norm(r) < pi`.
pub fn rot_right_jacobian_inv(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let coeff = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let k = skew(r);
    Matrix3::identity() + k * 0.5 + (k * k) * coeff
}

/// Interpolates between two poses: translation linearly component-wise,
/// rotation along the geodesic `R_a exp(alpha log(R_a^T R_b))`.
///
/// Rejects `alpha` outside `[0, 1]`.
pub fn interp_pose(a: &Pose6D, b: &Pose6D, alpha: f64) -> Result<Pose6D, GeometryError> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(GeometryError::AlphaOutOfRange(alpha));
    }
    let t = a.t * (1.0 - alpha) + b.t * alpha;
    let rot_a = rot_exp(&a.r);
    let geo = rot_log(&(rot_a.transpose() * rot_exp(&b.r)));
    let rot = rot_a * rot_exp(&(geo * alpha));
    Ok(Pose6D::new(t, rot_log(&rot)))
}
