//! Synthetic farm field: ground-truth passes over smooth terrain, a
//! matching elevation grid, and noisy sensor logs with controlled failure
//! and degradation modes.
//!
//! Everything is deterministic given the configuration and seed, so runs
//! are reproducible and statistical checks can pin their expectations.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dem::{DemError, DemGrid};
use crate::geometry::{phi, relative, rot_exp, rot_from_rpy, rot_log, rpy_from_rot, Pose6D};
use crate::pipeline::{
    GpsMode, GpsReading, ImuReading, PipelineError, PoseReading, SensorLog, WoReading,
};

/// Variance floor for reported covariances so zero-noise logs still carry
/// invertible matrices.
const VAR_FLOOR: f64 = 1e-8;

/// Truth sampling rate; every sensor stamp is an exact subset of these.
const TRUTH_HZ: f64 = 100.0;

/// Fixed plane-wave directions of the two terrain sinusoids.
const WAVE_DIRS: [[f64; 2]; 2] = [[0.921_060_994_002_885, 0.389_418_342_308_651], [
    -0.416_146_836_547_142,
    0.909_297_426_825_682,
]];

/// Gentle field slope per metre of configured amplitude, so zero
/// amplitude yields a horizontal plane.
const SLOPE_PER_AMPLITUDE: [f64; 2] = [0.01, 0.006];

/// How the robot handles headlands between rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringMode {
    /// Keeps one global heading, reversing down every second row and
    /// crabbing sideways between rows.
    SameHeading,
    /// Always drives forward, U-turning at each headland.
    Serpentine,
}

/// Field layout and drive parameters.
#[derive(Debug, Clone)]
pub struct FieldConfig {
    /// Number of crop rows.
    pub rows: usize,
    /// Length of each row, metres.
    pub row_length: f64,
    /// Lateral spacing between rows, metres.
    pub row_spacing: f64,
    /// Peak-to-mean terrain undulation, metres.
    pub amplitude: f64,
    /// Wavelengths of the two terrain sinusoids, metres.
    pub wavelengths: (f64, f64),
    /// Drive speed, metres per second.
    pub speed: f64,
    /// Headland behaviour.
    pub mode: SteeringMode,
    /// Seed for all sensor noise.
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> FieldConfig {
        FieldConfig {
            rows: 6,
            row_length: 30.0,
            row_spacing: 1.5,
            amplitude: 0.5,
            wavelengths: (20.0, 35.0),
            speed: 0.5,
            mode: SteeringMode::Serpentine,
            seed: 7,
        }
    }
}

/// Noise magnitudes and degradation schedules for every stream.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    /// Wheel translation noise per square-root metre of travel.
    pub wo_sigma_t: f64,
    /// Wheel heading noise per square-root metre of travel.
    pub wo_sigma_yaw: f64,
    /// Visual translation drift per square-root metre.
    pub vo_sigma_t: f64,
    /// Visual rotation drift per square-root metre.
    pub vo_sigma_r: f64,
    /// Expected visual failure episodes per second.
    pub vo_fail_rate: f64,
    /// Length of one visual failure episode, seconds.
    pub vo_fail_duration: f64,
    /// Noise multiplier during a visual failure episode. The reported
    /// covariance stays nominal.
    pub vo_fail_magnitude: f64,
    /// Lidar translation drift per square-root metre.
    pub lid_sigma_t: f64,
    /// Lidar rotation drift per square-root metre.
    pub lid_sigma_r: f64,
    /// Carrier-phase fix noise, horizontal and vertical, metres.
    pub rtk_sigma: (f64, f64),
    /// Point-positioning fix noise, horizontal and vertical, metres.
    pub ppp_sigma: (f64, f64),
    /// Fix quality outside outage windows.
    pub gps_mode: GpsMode,
    /// Outage windows `(start, end, fallback mode)`.
    pub gps_outages: Vec<(f64, f64, GpsMode)>,
    /// Roll and pitch noise, radians.
    pub imu_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> NoiseConfig {
        NoiseConfig {
            wo_sigma_t: 0.01,
            wo_sigma_yaw: 0.002,
            vo_sigma_t: 0.03,
            vo_sigma_r: 0.01,
            vo_fail_rate: 0.01,
            vo_fail_duration: 1.0,
            vo_fail_magnitude: 20.0,
            lid_sigma_t: 0.02,
            lid_sigma_r: 0.004,
            rtk_sigma: (0.02, 0.05),
            ppp_sigma: (0.5, 1.5),
            gps_mode: GpsMode::Rtk,
            gps_outages: Vec::new(),
            imu_sigma: 0.01,
        }
    }
}

impl NoiseConfig {
    /// A configuration with every magnitude zero and no failure episodes,
    /// so generated streams are exactly consistent with the truth.
    pub fn noiseless() -> NoiseConfig {
        NoiseConfig {
            wo_sigma_t: 0.0,
            wo_sigma_yaw: 0.0,
            vo_sigma_t: 0.0,
            vo_sigma_r: 0.0,
            vo_fail_rate: 0.0,
            lid_sigma_t: 0.0,
            lid_sigma_r: 0.0,
            rtk_sigma: (0.0, 0.0),
            ppp_sigma: (0.0, 0.0),
            imu_sigma: 0.0,
            ..NoiseConfig::default()
        }
    }
}

/// One ground-truth sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    /// Time since the start of the drive, seconds.
    pub stamp: f64,
    /// True pose in the field frame.
    pub pose: Pose6D,
    /// Crop row the robot is working, counting connectors with the nearer
    /// row.
    pub row_hint: i64,
}

/// Terrain elevation at a planar point: two plane-wave sinusoids at the
/// configured wavelengths plus a gentle constant slope.
pub fn terrain_height(cfg: &FieldConfig, x: f64, y: f64) -> f64 {
    let half = 0.5 * cfg.amplitude;
    let p1 = 2.0 * PI * (WAVE_DIRS[0][0] * x + WAVE_DIRS[0][1] * y) / cfg.wavelengths.0;
    let p2 = 2.0 * PI * (WAVE_DIRS[1][0] * x + WAVE_DIRS[1][1] * y) / cfg.wavelengths.1;
    let slope = [
        SLOPE_PER_AMPLITUDE[0] * cfg.amplitude,
        SLOPE_PER_AMPLITUDE[1] * cfg.amplitude,
    ];
    half * p1.sin() + half * p2.sin() + slope[0] * x + slope[1] * y
}

/// Analytic planar gradient of [`terrain_height`].
pub fn terrain_gradient(cfg: &FieldConfig, x: f64, y: f64) -> Vector2<f64> {
    let half = 0.5 * cfg.amplitude;
    let k1 = 2.0 * PI / cfg.wavelengths.0;
    let k2 = 2.0 * PI / cfg.wavelengths.1;
    let p1 = k1 * (WAVE_DIRS[0][0] * x + WAVE_DIRS[0][1] * y);
    let p2 = k2 * (WAVE_DIRS[1][0] * x + WAVE_DIRS[1][1] * y);
    let d1 = half * k1 * p1.cos();
    let d2 = half * k2 * p2.cos();
    Vector2::new(
        d1 * WAVE_DIRS[0][0] + d2 * WAVE_DIRS[1][0] + SLOPE_PER_AMPLITUDE[0] * cfg.amplitude,
        d1 * WAVE_DIRS[0][1] + d2 * WAVE_DIRS[1][1] + SLOPE_PER_AMPLITUDE[1] * cfg.amplitude,
    )
}

/// Samples the terrain into a regular grid covering the field plus
/// `margin` metres on every side.
pub fn export_dem(cfg: &FieldConfig, spacing: f64, margin: f64) -> Result<DemGrid, DemError> {
    let x_max = cfg.row_length + margin;
    let y_max = (cfg.rows.saturating_sub(1)) as f64 * cfg.row_spacing + margin;
    let origin = [-margin, -margin];
    let cols = ((x_max - origin[0]) / spacing).ceil() as usize + 1;
    let rows = ((y_max - origin[1]) / spacing).ceil() as usize + 1;
    let mut elevations = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = origin[0] + c as f64 * spacing;
            let y = origin[1] + r as f64 * spacing;
            elevations.push(terrain_height(cfg, x, y));
        }
    }
    DemGrid::new(origin, spacing, rows, cols, elevations)
}

/// Planar state along the drive path at arc length `s`.
struct PlanarState {
    x: f64,
    y: f64,
    yaw: f64,
    row_hint: i64,
}

/// Total drive length for a configuration.
fn path_length(cfg: &FieldConfig) -> f64 {
    let connector = match cfg.mode {
        SteeringMode::SameHeading => cfg.row_spacing,
        SteeringMode::Serpentine => 0.5 * PI * cfg.row_spacing,
    };
    cfg.rows as f64 * cfg.row_length + (cfg.rows.saturating_sub(1)) as f64 * connector
}

/// Planar pose at arc length `s` along the pass. Rows run along `x` at
/// heading zero on even rows, so the pipeline's zero-yaw start matches the
/// field frame. Serpentine connectors are half circles of radius half the
/// row spacing bulging past the row ends; same-heading connectors crab
/// sideways at a fixed heading.
fn planar_at(cfg: &FieldConfig, s: f64) -> PlanarState {
    let connector = match cfg.mode {
        SteeringMode::SameHeading => cfg.row_spacing,
        SteeringMode::Serpentine => 0.5 * PI * cfg.row_spacing,
    };
    let cell = cfg.row_length + connector;
    let row = ((s / cell).floor() as usize).min(cfg.rows - 1);
    let local = s - row as f64 * cell;
    let y_row = row as f64 * cfg.row_spacing;
    let even = row % 2 == 0;
    if local <= cfg.row_length || row + 1 == cfg.rows {
        let along = local.min(cfg.row_length);
        let (x, yaw) = match (cfg.mode, even) {
            (_, true) => (along, 0.0),
            (SteeringMode::SameHeading, false) => (cfg.row_length - along, 0.0),
            (SteeringMode::Serpentine, false) => (cfg.row_length - along, PI),
        };
        return PlanarState {
            x,
            y: y_row,
            yaw,
            row_hint: row as i64,
        };
    }
    let u = (local - cfg.row_length) / connector;
    let hint = if u < 0.5 { row as i64 } else { row as i64 + 1 };
    match cfg.mode {
        SteeringMode::SameHeading => {
            let edge = if even { cfg.row_length } else { 0.0 };
            PlanarState {
                x: edge,
                y: y_row + u * cfg.row_spacing,
                yaw: 0.0,
                row_hint: hint,
            }
        }
        SteeringMode::Serpentine => {
            let r = 0.5 * cfg.row_spacing;
            let cy = y_row + r;
            if even {
                let angle = -FRAC_PI_2 + PI * u;
                PlanarState {
                    x: cfg.row_length + r * angle.cos(),
                    y: cy + r * angle.sin(),
                    yaw: angle.cos().atan2(-angle.sin()),
                    row_hint: hint,
                }
            } else {
                let angle = -FRAC_PI_2 - PI * u;
                PlanarState {
                    x: r * angle.cos(),
                    y: cy + r * angle.sin(),
                    yaw: (-angle.cos()).atan2(angle.sin()),
                    row_hint: hint,
                }
            }
        }
    }
}

/// Attitude that keeps the wheels on the terrain: pitch follows the slope
/// along the heading, roll the slope across it, both to first order.
fn terrain_attitude(cfg: &FieldConfig, x: f64, y: f64, yaw: f64) -> (f64, f64) {
    let g = terrain_gradient(cfg, x, y);
    let (sy, cy) = yaw.sin_cos();
    let forward = g.x * cy + g.y * sy;
    let left = -g.x * sy + g.y * cy;
    ((left).atan(), (-forward).atan())
}

/// Ground-truth trajectory at the truth rate, covering the whole pass.
pub fn generate_truth(cfg: &FieldConfig) -> Vec<TruthSample> {
    assert!(cfg.rows >= 1, "need at least one row");
    assert!(
        cfg.row_length > 0.0 && cfg.row_spacing > 0.0 && cfg.speed > 0.0,
        "lengths and speed must be positive"
    );
    let total = path_length(cfg);
    let steps = (total / cfg.speed * TRUTH_HZ).floor() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let stamp = k as f64 / TRUTH_HZ;
        let s = (cfg.speed * stamp).min(total);
        let planar = planar_at(cfg, s);
        let (roll, pitch) = terrain_attitude(cfg, planar.x, planar.y, planar.yaw);
        let rot = rot_from_rpy(roll, pitch, planar.yaw);
        let t = Vector3::new(
            planar.x,
            planar.y,
            terrain_height(cfg, planar.x, planar.y),
        );
        out.push(TruthSample {
            stamp,
            pose: Pose6D::new(t, rot_log(&rot)),
            row_hint: planar.row_hint,
        });
    }
    out
}

/// Gaussian draw with the given standard deviation.
fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    n * sigma
}

/// Fix quality at a stamp under the outage schedule.
fn gps_mode_at(noise: &NoiseConfig, stamp: f64) -> GpsMode {
    for &(start, end, mode) in &noise.gps_outages {
        if stamp >= start && stamp < end {
            return mode;
        }
    }
    noise.gps_mode
}

/// Synthesizes every sensor stream from the truth. Streams run at fixed
/// divisors of the truth rate (wheel 20 Hz, visual 10 Hz, fixes 5 Hz,
/// attitude 50 Hz, lidar 2 Hz) with stamps exactly on truth samples, and
/// each stream closes with a reading at the final truth sample so no node
/// stamp falls outside a stream's span. Deterministic given the seed; each
/// stream draws from its own generator so changing one stream's rate
/// leaves the others untouched.
pub fn simulate_sensors(truth: &[TruthSample], noise: &NoiseConfig, seed: u64) -> SensorLog {
    let mut log = SensorLog::new();
    let mut rng_wo = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_vo = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut rng_lid = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut rng_gps = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut rng_imu = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));

    // Wheel odometry, every 5th truth sample.
    for pair in stream_indices(truth.len(), 5) {
        let (delta, cov) = match pair {
            (None, _) => (Vector3::zeros(), wo_cov(noise)),
            (Some(prev), next) => {
                let d = planar_delta(&truth[prev].pose, &truth[next].pose);
                let scale = d.xy().norm() + d.z.abs();
                let cov = wo_cov(noise);
                let noisy = Vector3::new(
                    d.x + gauss(&mut rng_wo, (noise.wo_sigma_t.powi(2) * scale).sqrt()),
                    d.y + gauss(&mut rng_wo, (noise.wo_sigma_t.powi(2) * scale).sqrt()),
                    d.z + gauss(&mut rng_wo, (noise.wo_sigma_yaw.powi(2) * scale).sqrt()),
                );
                (noisy, cov)
            }
        };
        log.wo.push(WoReading {
            stamp: truth[pair.1].stamp,
            delta,
            cov,
        });
    }

    // Visual odometry, every 10th sample, with failure episodes.
    let mut fail_until = f64::NEG_INFINITY;
    for pair in stream_indices(truth.len(), 10) {
        let stamp = truth[pair.1].stamp;
        if noise.vo_fail_rate > 0.0 && stamp > fail_until {
            let dt = 10.0 / TRUTH_HZ;
            if rng_vo.gen::<f64>() < noise.vo_fail_rate * dt {
                fail_until = stamp + noise.vo_fail_duration;
            }
        }
        let boost = if stamp <= fail_until {
            noise.vo_fail_magnitude
        } else {
            1.0
        };
        let reading = rigid_reading(
            truth,
            pair,
            noise.vo_sigma_t,
            noise.vo_sigma_r,
            boost,
            &mut rng_vo,
        );
        log.vo.push(reading);
    }

    // Lidar odometry, every 50th sample.
    for pair in stream_indices(truth.len(), 50) {
        let reading = rigid_reading(
            truth,
            pair,
            noise.lid_sigma_t,
            noise.lid_sigma_r,
            1.0,
            &mut rng_lid,
        );
        log.lid.push(reading);
    }

    // Fixes, every 20th sample.
    for pair in stream_indices(truth.len(), 20) {
        let stamp = truth[pair.1].stamp;
        let mode = gps_mode_at(noise, stamp);
        let (sxy, sz) = match mode {
            GpsMode::Rtk => noise.rtk_sigma,
            GpsMode::Ppp => noise.ppp_sigma,
        };
        let p = truth[pair.1].pose.t;
        let position = Vector3::new(
            p.x + gauss(&mut rng_gps, sxy),
            p.y + gauss(&mut rng_gps, sxy),
            p.z + gauss(&mut rng_gps, sz),
        );
        let cov = Matrix3::from_diagonal(&Vector3::new(
            (sxy * sxy).max(VAR_FLOOR),
            (sxy * sxy).max(VAR_FLOOR),
            (sz * sz).max(VAR_FLOOR),
        ));
        log.gps.push(GpsReading {
            stamp,
            position,
            cov,
            mode,
        });
    }

    // Attitude, every 2nd sample.
    for pair in stream_indices(truth.len(), 2) {
        let (roll, pitch, _) = rpy_from_rot(&rot_exp(&truth[pair.1].pose.r));
        let rollpitch = Vector2::new(
            roll + gauss(&mut rng_imu, noise.imu_sigma),
            pitch + gauss(&mut rng_imu, noise.imu_sigma),
        );
        let v = (noise.imu_sigma * noise.imu_sigma).max(VAR_FLOOR);
        log.imu.push(ImuReading {
            stamp: truth[pair.1].stamp,
            rollpitch,
            cov: Matrix2::from_diagonal(&Vector2::new(v, v)),
        });
    }

    log
}

/// Reading index pairs `(previous, current)` for a stream that keeps every
/// `divisor`-th truth sample. The first reading has no previous sample and
/// carries a zero delta. A final reading over the leftover partial interval
/// closes the stream at the last truth sample, so every stream spans the
/// whole run.
fn stream_indices(n: usize, divisor: usize) -> Vec<(Option<usize>, usize)> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for k in (0..n).step_by(divisor) {
        out.push((prev, k));
        prev = Some(k);
    }
    if let Some(last) = prev {
        if last != n - 1 {
            out.push((Some(last), n - 1));
        }
    }
    out
}

/// Per-unit-motion wheel covariance, floored for zero-noise configs.
fn wo_cov(noise: &NoiseConfig) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        (noise.wo_sigma_t * noise.wo_sigma_t).max(VAR_FLOOR),
        (noise.wo_sigma_t * noise.wo_sigma_t).max(VAR_FLOOR),
        (noise.wo_sigma_yaw * noise.wo_sigma_yaw).max(VAR_FLOOR),
    ))
}

/// Planar relative motion `(dx, dy, dyaw)` between two true poses: the
/// planar components of the full relative transform, matching what a
/// wheel-odometry constraint predicts from the states.
fn planar_delta(a: &Pose6D, b: &Pose6D) -> Vector3<f64> {
    let v = phi(&relative(&a.to_transform(), &b.to_transform()));
    Vector3::new(v[0], v[1], v[5])
}

/// One rigid odometry reading over a stream interval: the true relative
/// pose plus drift noise scaled by the square root of traveled distance.
/// `boost` multiplies the injected noise but not the reported covariance.
fn rigid_reading(
    truth: &[TruthSample],
    pair: (Option<usize>, usize),
    sigma_t: f64,
    sigma_r: f64,
    boost: f64,
    rng: &mut ChaCha8Rng,
) -> PoseReading {
    let stamp = truth[pair.1].stamp;
    let (mut delta, dist) = match pair.0 {
        None => (Vector6::zeros(), 0.0),
        Some(prev) => {
            let rel = relative(
                &truth[prev].pose.to_transform(),
                &truth[pair.1].pose.to_transform(),
            );
            let v = phi(&rel);
            let dist = v.fixed_rows::<3>(0).norm();
            (v, dist)
        }
    };
    let var_t = (sigma_t * sigma_t * dist).max(VAR_FLOOR);
    let var_r = (sigma_r * sigma_r * dist).max(VAR_FLOOR);
    if pair.0.is_some() {
        for k in 0..3 {
            delta[k] += gauss(rng, boost * (sigma_t * sigma_t * dist).sqrt());
            delta[k + 3] += gauss(rng, boost * (sigma_r * sigma_r * dist).sqrt());
        }
    }
    let mut cov = Matrix6::zeros();
    for k in 0..3 {
        cov[(k, k)] = var_t;
        cov[(k + 3, k + 3)] = var_r;
    }
    PoseReading { stamp, delta, cov }
}

/// Serializes a truth trajectory: one `GT <stamp> <x> <y> <z> <roll>
/// <pitch> <yaw> <row_hint>` line per sample.
pub fn truth_to_text(truth: &[TruthSample]) -> String {
    let mut out = String::new();
    for s in truth {
        let rot = crate::geometry::rot_exp(&s.pose.r);
        let (roll, pitch, yaw) = crate::geometry::rpy_from_rot(&rot);
        writeln!(
            out,
            "GT {} {} {} {} {} {} {} {}",
            s.stamp, s.pose.t.x, s.pose.t.y, s.pose.t.z, roll, pitch, yaw, s.row_hint
        )
        .unwrap();
    }
    out
}

/// Parses the format written by [`truth_to_text`].
pub fn truth_from_text(text: &str) -> Result<Vec<TruthSample>, PipelineError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_ascii_whitespace().collect();
        if fields.len() != 9 || fields[0] != "GT" {
            return Err(PipelineError::Parse {
                line,
                message: "expected GT line with 8 fields".to_string(),
            });
        }
        let mut v = [0.0f64; 7];
        for (slot, field) in v.iter_mut().zip(&fields[1..8]) {
            *slot = field.parse().map_err(|_| PipelineError::Parse {
                line,
                message: format!("bad float {field:?}"),
            })?;
        }
        let row_hint: i64 = fields[8].parse().map_err(|_| PipelineError::Parse {
            line,
            message: format!("bad row hint {:?}", fields[8]),
        })?;
        let rot = rot_from_rpy(v[4], v[5], v[6]);
        out.push(TruthSample {
            stamp: v[0],
            pose: Pose6D::new(Vector3::new(v[1], v[2], v[3]), rot_log(&rot)),
            row_hint,
        });
    }
    Ok(out)
}

/// Writes a truth trajectory to a file.
pub fn write_truth(truth: &[TruthSample], path: &Path) -> Result<(), PipelineError> {
    std::fs::write(path, truth_to_text(truth))?;
    Ok(())
}

/// Reads a truth trajectory from a file.
pub fn read_truth(path: &Path) -> Result<Vec<TruthSample>, PipelineError> {
    truth_from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_exp;
    use crate::pipeline::{trigger_nodes, PipelineConfig};
    use approx::assert_relative_eq;

    fn small_field() -> FieldConfig {
        FieldConfig {
            rows: 2,
            row_length: 6.0,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn zero_amplitude_leaves_a_plane() {
        let cfg = FieldConfig {
            amplitude: 0.0,
            ..FieldConfig::default()
        };
        for (x, y) in [(0.0, 0.0), (3.7, -2.1), (25.0, 14.0)] {
            assert_eq!(terrain_height(&cfg, x, y), 0.0);
            assert_eq!(terrain_gradient(&cfg, x, y), Vector2::zeros());
        }
        let sloped = FieldConfig::default();
        let h = terrain_height(&sloped, 10.0, 0.0) - terrain_height(&sloped, -10.0, 0.0);
        assert!(h.abs() > 0.05, "default field should not be level");
    }

    #[test]
    fn terrain_gradient_matches_finite_differences() {
        let cfg = FieldConfig::default();
        let eps = 1e-6;
        for (x, y) in [(0.0, 0.0), (4.3, 9.1), (-7.0, 22.5), (13.9, -3.3)] {
            let g = terrain_gradient(&cfg, x, y);
            let gx = (terrain_height(&cfg, x + eps, y) - terrain_height(&cfg, x - eps, y))
                / (2.0 * eps);
            let gy = (terrain_height(&cfg, x, y + eps) - terrain_height(&cfg, x, y - eps))
                / (2.0 * eps);
            assert_relative_eq!(g.x, gx, epsilon = 1e-6);
            assert_relative_eq!(g.y, gy, epsilon = 1e-6);
        }
    }

    #[test]
    fn exported_grid_stays_within_interpolation_bound() {
        let cfg = FieldConfig::default();
        let spacing = 10.0;
        let dem = export_dem(&cfg, spacing, 20.0).unwrap();
        let bound =
            cfg.amplitude * (PI * spacing / cfg.wavelengths.0.min(cfg.wavelengths.1)).powi(2)
                / 2.0;
        let mut worst: f64 = 0.0;
        for i in 0..40 {
            for j in 0..40 {
                let x = -15.0 + i as f64 * 1.5;
                let y = -15.0 + j as f64 * 1.0;
                let q = dem.query(x, y).unwrap();
                worst = worst.max((q - terrain_height(&cfg, x, y)).abs());
            }
        }
        assert!(worst <= bound, "worst {worst} exceeds bound {bound}");
    }

    #[test]
    fn single_row_is_a_straight_line() {
        let cfg = FieldConfig {
            rows: 1,
            ..FieldConfig::default()
        };
        let truth = generate_truth(&cfg);
        let last = truth.last().unwrap();
        assert_relative_eq!(last.pose.t.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(last.pose.t.x, cfg.row_length, epsilon = 1e-2);
        for s in &truth {
            let (_, _, yaw) = crate::geometry::rpy_from_rot(&rot_exp(&s.pose.r));
            assert_relative_eq!(yaw, 0.0, epsilon = 1e-9);
            assert_eq!(s.row_hint, 0);
        }
    }

    #[test]
    fn same_heading_keeps_constant_yaw() {
        let cfg = FieldConfig {
            mode: SteeringMode::SameHeading,
            rows: 3,
            row_length: 8.0,
            ..FieldConfig::default()
        };
        for s in generate_truth(&cfg) {
            let (_, _, yaw) = crate::geometry::rpy_from_rot(&rot_exp(&s.pose.r));
            assert_relative_eq!(yaw, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn serpentine_turn_sweeps_the_heading() {
        let truth = generate_truth(&small_field());
        let yaws: Vec<f64> = truth
            .iter()
            .map(|s| {
                let (_, _, yaw) = crate::geometry::rpy_from_rot(&rot_exp(&s.pose.r));
                yaw
            })
            .collect();
        assert!(yaws[0].abs() < 1e-9);
        let apex = yaws.iter().fold(f64::INFINITY, |m, y| m.min((y - FRAC_PI_2).abs()));
        assert!(apex < 0.05, "turn apex missing, min |yaw - pi/2| = {apex}");
        assert!(yaws.iter().any(|&y| y.abs() > 3.0), "return row never faces back");
        assert_eq!(truth.first().unwrap().row_hint, 0);
        assert_eq!(truth.last().unwrap().row_hint, 1);
    }

    #[test]
    fn default_field_matches_paper_scale() {
        let cfg = FieldConfig::default();
        let truth = generate_truth(&cfg);
        let log = simulate_sensors(&truth, &NoiseConfig::noiseless(), cfg.seed);
        let stamps = trigger_nodes(&log, &PipelineConfig::default());
        assert!(
            stamps.len() >= 600,
            "only {} node-rate samples",
            stamps.len()
        );
    }

    #[test]
    fn noiseless_streams_are_exactly_consistent() {
        let cfg = small_field();
        let truth = generate_truth(&cfg);
        let log = simulate_sensors(&truth, &NoiseConfig::noiseless(), cfg.seed);
        let at = |stamp: f64| -> &TruthSample {
            let k = (stamp * TRUTH_HZ).round() as usize;
            &truth[k]
        };
        for w in log.wo.windows(2) {
            let d = planar_delta(&at(w[0].stamp).pose, &at(w[1].stamp).pose);
            assert_relative_eq!(w[1].delta, d, epsilon = 1e-12);
        }
        for w in log.vo.windows(2) {
            let rel = relative(
                &at(w[0].stamp).pose.to_transform(),
                &at(w[1].stamp).pose.to_transform(),
            );
            assert_relative_eq!(w[1].delta, phi(&rel), epsilon = 1e-12);
        }
        for g in &log.gps {
            assert_relative_eq!(g.position, at(g.stamp).pose.t, epsilon = 1e-15);
        }
        for m in &log.imu {
            let (roll, pitch, _) = crate::geometry::rpy_from_rot(&rot_exp(&at(m.stamp).pose.r));
            assert_relative_eq!(m.rollpitch, Vector2::new(roll, pitch), epsilon = 1e-15);
        }
    }

    #[test]
    fn stamps_are_co_registered_with_truth() {
        let cfg = small_field();
        let truth = generate_truth(&cfg);
        let log = simulate_sensors(&truth, &NoiseConfig::default(), cfg.seed);
        let known: std::collections::BTreeSet<u64> =
            truth.iter().map(|s| s.stamp.to_bits()).collect();
        let streams: Vec<f64> = log
            .wo
            .iter()
            .map(|r| r.stamp)
            .chain(log.vo.iter().map(|r| r.stamp))
            .chain(log.lid.iter().map(|r| r.stamp))
            .chain(log.gps.iter().map(|r| r.stamp))
            .chain(log.imu.iter().map(|r| r.stamp))
            .collect();
        for s in streams {
            assert!(known.contains(&s.to_bits()), "stamp {s} not a truth stamp");
        }
    }

    #[test]
    fn same_seed_reproduces_the_log() {
        let cfg = small_field();
        let truth = generate_truth(&cfg);
        let a = simulate_sensors(&truth, &NoiseConfig::default(), 42);
        let b = simulate_sensors(&truth, &NoiseConfig::default(), 42);
        assert_eq!(a, b);
        let c = simulate_sensors(&truth, &NoiseConfig::default(), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn ppp_vertical_error_matches_configured_sigma() {
        let cfg = FieldConfig::default();
        let truth = generate_truth(&cfg);
        let noise = NoiseConfig {
            gps_mode: GpsMode::Ppp,
            ..NoiseConfig::default()
        };
        let log = simulate_sensors(&truth, &noise, cfg.seed);
        assert!(log.gps.len() >= 600);
        let mut sq = 0.0;
        for g in &log.gps {
            let k = (g.stamp * TRUTH_HZ).round() as usize;
            sq += (g.position.z - truth[k].pose.t.z).powi(2);
        }
        let rmse = (sq / log.gps.len() as f64).sqrt();
        assert!(
            (rmse - 1.5).abs() <= 0.15,
            "z RMSE {rmse} outside 1.5 +- 10%"
        );
    }

    #[test]
    fn outage_schedule_switches_mode() {
        let cfg = small_field();
        let truth = generate_truth(&cfg);
        let noise = NoiseConfig {
            gps_outages: vec![(5.0, 10.0, GpsMode::Ppp)],
            ..NoiseConfig::default()
        };
        let log = simulate_sensors(&truth, &noise, cfg.seed);
        for g in &log.gps {
            let expect = if g.stamp >= 5.0 && g.stamp < 10.0 {
                GpsMode::Ppp
            } else {
                GpsMode::Rtk
            };
            assert_eq!(g.mode, expect, "at stamp {}", g.stamp);
        }
    }

    #[test]
    fn reported_covariances_are_statistically_consistent() {
        let cfg = FieldConfig::default();
        let truth = generate_truth(&cfg);
        let noise = NoiseConfig {
            vo_fail_rate: 0.0,
            ..NoiseConfig::default()
        };
        let log = simulate_sensors(&truth, &noise, cfg.seed);
        let at = |stamp: f64| -> &TruthSample {
            let k = (stamp * TRUTH_HZ).round() as usize;
            &truth[k]
        };
        let mut checks: Vec<(&str, f64, f64)> = Vec::new();

        let mut nees = 0.0;
        for w in log.wo.windows(2) {
            let d = planar_delta(&at(w[0].stamp).pose, &at(w[1].stamp).pose);
            let scale = d.xy().norm() + d.z.abs();
            let e = w[1].delta - d;
            for k in 0..3 {
                nees += e[k] * e[k] / (w[1].cov[(k, k)] * scale);
            }
        }
        checks.push(("WO", nees, 3.0 * (log.wo.len() - 1) as f64));

        let mut nees = 0.0;
        for w in log.vo.windows(2) {
            let rel = relative(
                &at(w[0].stamp).pose.to_transform(),
                &at(w[1].stamp).pose.to_transform(),
            );
            let e = w[1].delta - phi(&rel);
            for k in 0..6 {
                nees += e[k] * e[k] / w[1].cov[(k, k)];
            }
        }
        checks.push(("VO", nees, 6.0 * (log.vo.len() - 1) as f64));

        let mut nees = 0.0;
        for g in &log.gps {
            let e = g.position - at(g.stamp).pose.t;
            for k in 0..3 {
                nees += e[k] * e[k] / g.cov[(k, k)];
            }
        }
        checks.push(("GPS", nees, 3.0 * log.gps.len() as f64));

        let mut nees = 0.0;
        for m in &log.imu {
            let (roll, pitch, _) =
                crate::geometry::rpy_from_rot(&rot_exp(&at(m.stamp).pose.r));
            let e = m.rollpitch - Vector2::new(roll, pitch);
            nees += e.x * e.x / m.cov[(0, 0)] + e.y * e.y / m.cov[(1, 1)];
        }
        checks.push(("IMU", nees, 2.0 * log.imu.len() as f64));

        for (name, sum, dof) in checks {
            let z = (sum - dof) / (2.0 * dof).sqrt();
            assert!(
                z.abs() < 3.0,
                "{name} normalized error sum {sum:.1} vs dof {dof:.0} (z = {z:.2})"
            );
        }
    }

    #[test]
    fn failure_episodes_exceed_nominal_noise() {
        let cfg = FieldConfig::default();
        let truth = generate_truth(&cfg);
        let noise = NoiseConfig {
            vo_fail_rate: 0.05,
            ..NoiseConfig::default()
        };
        let log = simulate_sensors(&truth, &noise, cfg.seed);
        let at = |stamp: f64| -> &TruthSample {
            let k = (stamp * TRUTH_HZ).round() as usize;
            &truth[k]
        };
        let mut gross = 0usize;
        for w in log.vo.windows(2) {
            let rel = relative(
                &at(w[0].stamp).pose.to_transform(),
                &at(w[1].stamp).pose.to_transform(),
            );
            let e = w[1].delta - phi(&rel);
            let sigma = w[1].cov[(0, 0)].sqrt();
            if e.fixed_rows::<3>(0).norm() > 8.0 * sigma {
                gross += 1;
            }
        }
        assert!(gross > 5, "expected gross visual errors, saw {gross}");
    }

    #[test]
    fn truth_text_round_trips() {
        let truth = generate_truth(&small_field());
        let text = truth_to_text(&truth);
        let back = truth_from_text(&text).unwrap();
        assert_eq!(back.len(), truth.len());
        for (a, b) in truth.iter().zip(&back) {
            assert_eq!(a.stamp.to_bits(), b.stamp.to_bits());
            assert_eq!(a.row_hint, b.row_hint);
            assert_relative_eq!(a.pose.t, b.pose.t, epsilon = 1e-12);
            // Rotations are compared as matrices; the axis-angle chart is
            // ill-conditioned near half-turn headings.
            assert_relative_eq!(
                rot_exp(&a.pose.r),
                rot_exp(&b.pose.r),
                epsilon = 1e-9
            );
        }
    }
}
