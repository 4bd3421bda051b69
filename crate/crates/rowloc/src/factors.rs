//! Pose-graph constraint types: measurement predictions, error functions
//! and the dynamic information-matrix rules.
//!
//! Eight factor kinds cover the sensor cues. Binary kinds constrain the
//! relative motion between two nodes (wheel odometry, visual odometry,
//! LiDAR registration, the Ackermann motion model, and the terrain
//! smoothness prior); unary kinds constrain a single node (GPS position,
//! IMU attitude, elevation-map altitude).
//!
//! Errors follow `e = z - zhat` with rotation components compared through
//! [`rot_diff`], so coaxial rotations reduce to a wrapped subtraction.
//! Information matrices may be rank deficient (a smoothness factor
//! constrains only the altitude difference); the solver accepts PSD
//! per-factor information.

use crate::dem::DemGrid;
use crate::geometry::{phi, relative, rot_diff, rot_exp, rot_log, rpy_from_rot, Pose6D, Transform};
use nalgebra::{Matrix2, Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Floor applied to motion-proportional information scalings.
pub const EPS_SCALE: f64 = 1e-4;
/// Floor on the planar distance in the smoothness-prior weight.
pub const MRF_DIST_FLOOR: f64 = 0.05;

/// Errors from factor construction and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("binary factor evaluated without a second node state")]
    MissingSecondState,
    #[error("covariance is not positive-definite on its active block")]
    SingularCovariance,
}

/// The constraint kinds of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorKind {
    /// Wheel odometry: planar relative motion (t_x, t_y, r_z).
    Wo,
    /// Visual odometry: full 6-DoF relative motion.
    Vo,
    /// LiDAR registration: full 6-DoF relative motion.
    Lid,
    /// Ackermann motion model: self-consistency of the relative motion.
    Amm,
    /// Terrain smoothness prior on the altitude difference.
    Mrf,
    /// GPS position prior.
    Gps,
    /// IMU roll/pitch prior.
    Imu,
    /// Elevation-map altitude prior.
    Dem,
}

impl FactorKind {
    /// Binary kinds constrain two nodes, unary kinds one.
    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            FactorKind::Wo | FactorKind::Vo | FactorKind::Lid | FactorKind::Amm | FactorKind::Mrf
        )
    }

    /// Serialized tag, also used in cue masks.
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Wo => "WO",
            FactorKind::Vo => "VO",
            FactorKind::Lid => "LID",
            FactorKind::Amm => "AMM",
            FactorKind::Mrf => "MRF",
            FactorKind::Gps => "GPS",
            FactorKind::Imu => "IMU",
            FactorKind::Dem => "DEM",
        }
    }

    /// Parses a serialized tag.
    pub fn from_name(s: &str) -> Option<FactorKind> {
        Some(match s {
            "WO" => FactorKind::Wo,
            "VO" => FactorKind::Vo,
            "LID" => FactorKind::Lid,
            "AMM" => FactorKind::Amm,
            "MRF" => FactorKind::Mrf,
            "GPS" => FactorKind::Gps,
            "IMU" => FactorKind::Imu,
            "DEM" => FactorKind::Dem,
            _ => return None,
        })
    }

    /// All kinds in serialization order.
    pub fn all() -> [FactorKind; 8] {
        [
            FactorKind::Gps,
            FactorKind::Wo,
            FactorKind::Vo,
            FactorKind::Imu,
            FactorKind::Amm,
            FactorKind::Lid,
            FactorKind::Mrf,
            FactorKind::Dem,
        ]
    }
}

impl std::fmt::Display for FactorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One graph constraint: measurement, information and node references.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub node_i: usize,
    /// Present exactly for binary kinds.
    pub node_j: Option<usize>,
    /// Measurement 6-vector; slots outside the active subspace are zero.
    pub z: Vector6<f64>,
    /// Symmetric PSD information matrix (rank deficiency allowed).
    pub info: Matrix6<f64>,
}

/// Tunable weighting constants of the information-assignment rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    /// Scale on the VO rotational covariance.
    pub lambda_vo_r: f64,
    /// Scale on the VO translational covariance.
    pub lambda_vo_t: f64,
    /// Numerator of the distance-weighted smoothness prior.
    pub lambda_mrf: f64,
    /// Fixed altitude-prior weight for elevation-map factors.
    pub w_dem_z: f64,
    /// Planar WO/VO discrepancy (meters per node interval) above which the
    /// VO factor is treated as failed.
    pub vo_fail_threshold: f64,
    /// Information down-scale applied to failed VO factors.
    pub vo_fail_scale: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            lambda_vo_r: 5.0,
            lambda_vo_t: 1.0,
            lambda_mrf: 0.8,
            w_dem_z: 5.0,
            vo_fail_threshold: 0.1,
            vo_fail_scale: 0.01,
        }
    }
}

/// Expected measurement for a factor kind at the given states.
pub fn predict(
    kind: FactorKind,
    x_i: &Transform,
    x_j: Option<&Transform>,
) -> Result<Vector6<f64>, FactorError> {
    let rel = if kind.is_binary() {
        Some(relative(x_i, x_j.ok_or(FactorError::MissingSecondState)?))
    } else {
        None
    };
    Ok(match kind {
        FactorKind::Vo | FactorKind::Lid => phi(&rel.unwrap()),
        FactorKind::Wo => {
            let v = phi(&rel.unwrap());
            let mut out = Vector6::zeros();
            out[0] = v[0];
            out[1] = v[1];
            out[5] = v[5];
            out
        }
        FactorKind::Amm => ackermann_project(&rel.unwrap()),
        FactorKind::Mrf => {
            let x_j = x_j.ok_or(FactorError::MissingSecondState)?;
            let mut out = Vector6::zeros();
            out[2] = x_i.translation().z - x_j.translation().z;
            out
        }
        FactorKind::Dem => {
            let mut out = Vector6::zeros();
            out[2] = x_i.translation().z;
            out
        }
        FactorKind::Gps => {
            let mut out = Vector6::zeros();
            out.fixed_rows_mut::<3>(0).copy_from(&x_i.translation());
            out
        }
        FactorKind::Imu => {
            let (roll, pitch, _) = rpy_from_rot(&x_i.rotation());
            let mut out = Vector6::zeros();
            out[3] = roll;
            out[4] = pitch;
            out
        }
    })
}

/// Projects a relative motion onto the Ackermann arc-chord model.
///
/// The rotation is factored exactly as `R = Ry(dr_y) Rx(dr_x) Rz(dr_z)`:
/// the tilt `Q = Ry Rx` is the local ground-plane attitude and `dr_z` the
/// heading change within that plane. The model translation is the chord of
/// the steering arc, of length `rho` and bisecting the heading change,
/// expressed in the tilted plane. `rho` is signed by the forward component
/// so reverse traversal projects onto reverse arcs.
///
/// The rotation passes through unchanged, so the projection constrains
/// only the translation (lateral slip and out-of-plane motion) and is
/// exactly idempotent on model-consistent motions.
pub fn ackermann_project(x_rel: &Transform) -> Vector6<f64> {
    let rot = x_rel.rotation();
    let dr_x = (-rot[(1, 2)]).clamp(-1.0, 1.0).asin();
    let dr_y = rot[(0, 2)].atan2(rot[(2, 2)]);
    let tilt = rot_exp(&Vector3::new(0.0, dr_y, 0.0)) * rot_exp(&Vector3::new(dr_x, 0.0, 0.0));
    let in_plane = tilt.transpose() * rot;
    let dr_z = in_plane[(1, 0)].atan2(in_plane[(0, 0)]);

    let local = tilt.transpose() * x_rel.translation();
    let rho = local.x.hypot(local.y) * if local.x < 0.0 { -1.0 } else { 1.0 };
    let half = dr_z / 2.0;
    let chord = Vector3::new(rho * half.cos(), rho * half.sin(), 0.0);

    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(tilt * chord));
    out.fixed_rows_mut::<3>(3).copy_from(&rot_log(&rot));
    out
}

/// Wraps an angle difference into `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Residual `e = z (-) zhat` for a factor at the given states.
///
/// The motion-model factor is self-consistent: its measurement is the
/// current relative motion itself, so the residual penalizes the
/// components the Ackermann projection removes.
pub fn error(
    f: &Factor,
    x_i: &Transform,
    x_j: Option<&Transform>,
) -> Result<Vector6<f64>, FactorError> {
    let zhat = predict(f.kind, x_i, x_j)?;
    let z = if f.kind == FactorKind::Amm {
        phi(&relative(x_i, x_j.ok_or(FactorError::MissingSecondState)?))
    } else {
        f.z
    };
    Ok(match f.kind {
        FactorKind::Vo | FactorKind::Lid | FactorKind::Amm => {
            let mut e = Vector6::zeros();
            let dt = z.fixed_rows::<3>(0) - zhat.fixed_rows::<3>(0);
            e.fixed_rows_mut::<3>(0).copy_from(&dt);
            let dr = rot_diff(&zhat.fixed_rows::<3>(3).into(), &z.fixed_rows::<3>(3).into());
            e.fixed_rows_mut::<3>(3).copy_from(&dr);
            e
        }
        FactorKind::Wo => {
            let mut e = Vector6::zeros();
            e[0] = z[0] - zhat[0];
            e[1] = z[1] - zhat[1];
            e[5] = wrap_angle(z[5] - zhat[5]);
            e
        }
        FactorKind::Gps | FactorKind::Imu | FactorKind::Mrf | FactorKind::Dem => z - zhat,
    })
}

/// Inverts an SPD matrix via Cholesky, rejecting indefinite input.
fn invert_spd<const N: usize>(
    m: &nalgebra::SMatrix<f64, N, N>,
) -> Result<nalgebra::SMatrix<f64, N, N>, FactorError> {
    nalgebra::Cholesky::new(*m)
        .map(|c| c.inverse())
        .ok_or(FactorError::SingularCovariance)
}

/// Wheel-odometry information: inverse of the per-unit-motion covariance
/// scaled by the traveled distance plus rotation, on the planar block
/// (t_x, t_y, r_z).
pub fn build_wo_info(
    sigma_wo: &Matrix3<f64>,
    dist: f64,
    rot: f64,
) -> Result<Matrix6<f64>, FactorError> {
    let scale = (dist + rot).max(EPS_SCALE);
    let inv = invert_spd(&(sigma_wo * scale))?;
    let mut info = Matrix6::zeros();
    let idx = [0usize, 1, 5];
    for (a, &ra) in idx.iter().enumerate() {
        for (b, &rb) in idx.iter().enumerate() {
            info[(ra, rb)] = inv[(a, b)];
        }
    }
    Ok(info)
}

/// Visual-odometry information: block-diagonal inverses of the scaled
/// translational and rotational covariances.
pub fn build_vo_info(
    sigma_vo_t: &Matrix3<f64>,
    sigma_vo_r: &Matrix3<f64>,
    params: &WeightParams,
) -> Result<Matrix6<f64>, FactorError> {
    let inv_t = invert_spd(&(sigma_vo_t * params.lambda_vo_t))?;
    let inv_r = invert_spd(&(sigma_vo_r * params.lambda_vo_r))?;
    let mut info = Matrix6::zeros();
    info.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv_t);
    info.fixed_view_mut::<3, 3>(3, 3).copy_from(&inv_r);
    Ok(info)
}

/// Smoothness prior between two nodes: zero target on the altitude
/// difference, weighted inversely by the planar distance.
pub fn build_mrf_factor(
    node_i: usize,
    node_j: usize,
    est_i: &Pose6D,
    est_j: &Pose6D,
    params: &WeightParams,
) -> Factor {
    let planar = (est_i.t.x - est_j.t.x).hypot(est_i.t.y - est_j.t.y);
    let w = params.lambda_mrf / planar.max(MRF_DIST_FLOOR);
    let mut info = Matrix6::zeros();
    info[(2, 2)] = w;
    Factor {
        kind: FactorKind::Mrf,
        node_i,
        node_j: Some(node_j),
        z: Vector6::zeros(),
        info,
    }
}

/// Elevation prior: queries the map at the node's current planar estimate;
/// absent when the estimate falls outside the map.
pub fn build_dem_factor(
    node_i: usize,
    est_i: &Pose6D,
    dem: &DemGrid,
    params: &WeightParams,
) -> Option<Factor> {
    let altitude = dem.query(est_i.t.x, est_i.t.y).ok()?;
    let mut z = Vector6::zeros();
    z[2] = altitude;
    let mut info = Matrix6::zeros();
    info[(2, 2)] = params.w_dem_z;
    Some(Factor {
        kind: FactorKind::Dem,
        node_i,
        node_j: None,
        z,
        info,
    })
}

/// Motion-model information: identity scaled inversely by traveled
/// distance (short intervals obey the model best).
pub fn build_amm_info(dist: f64) -> Matrix6<f64> {
    Matrix6::identity() / dist.max(EPS_SCALE)
}

/// GPS position prior from the receiver-reported covariance.
pub fn build_gps_factor(
    node_i: usize,
    position: &Vector3<f64>,
    cov: &Matrix3<f64>,
) -> Result<Factor, FactorError> {
    let inv = invert_spd(cov)?;
    let mut z = Vector6::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(position);
    let mut info = Matrix6::zeros();
    info.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv);
    Ok(Factor {
        kind: FactorKind::Gps,
        node_i,
        node_j: None,
        z,
        info,
    })
}

/// IMU attitude prior on the roll and pitch angles.
pub fn build_imu_factor(
    node_i: usize,
    roll: f64,
    pitch: f64,
    cov: &Matrix2<f64>,
) -> Result<Factor, FactorError> {
    let inv = invert_spd(cov)?;
    let mut z = Vector6::zeros();
    z[3] = roll;
    z[4] = pitch;
    let mut info = Matrix6::zeros();
    info.fixed_view_mut::<2, 2>(3, 3).copy_from(&inv);
    Ok(Factor {
        kind: FactorKind::Imu,
        node_i,
        node_j: None,
        z,
        info,
    })
}

/// LiDAR registration constraint with its full 6x6 covariance.
pub fn build_lid_factor(
    node_i: usize,
    node_j: usize,
    z: Vector6<f64>,
    cov: &Matrix6<f64>,
) -> Result<Factor, FactorError> {
    let info = invert_spd(cov)?;
    Ok(Factor {
        kind: FactorKind::Lid,
        node_i,
        node_j: Some(node_j),
        z,
        info,
    })
}

/// VO failure gate: compares the planar translation of the wheel and
/// visual odometry over the same interval. Returns 1 when they agree
/// within the threshold (inclusive), else the down-scale to apply to the
/// VO information.
pub fn vo_failure_scale(wo_delta: &Pose6D, vo_delta: &Pose6D, params: &WeightParams) -> f64 {
    let d = (wo_delta.t.x - vo_delta.t.x).hypot(wo_delta.t.y - vo_delta.t.y);
    if d <= params.vo_fail_threshold {
        1.0
    } else {
        params.vo_fail_scale
    }
}
