//! Front end that turns raw sensor logs into pose graphs and drives the
//! solver, either incrementally over a sliding window or in one batch pass.
//!
//! The entry points are [`run_online`] and [`run_batch`]. Both consume a
//! [`SensorLog`], a cue selection, and an optional terrain grid, and return
//! the optimized graph. The intermediate stages (node triggering, stream
//! synchronization, factor assembly, window sizing) are public so they can
//! be exercised and reused independently.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::dem::DemGrid;
use crate::factors::{
    build_amm_info, build_dem_factor, build_gps_factor, build_imu_factor, build_lid_factor,
    build_mrf_factor, build_vo_info, build_wo_info, vo_failure_scale, Factor, FactorKind,
    WeightParams,
};
use crate::geometry::{interp_pose, phi, relative, rot_exp, Pose6D, Transform};
use crate::graph::{GraphError, PoseGraph};
use crate::solver::{lm_optimize, SolveReport, SolverConfig, SolverError};

/// Readings separated by more than this multiple of the stream's typical
/// period are not bridged by interpolation; the stream reports absent.
const GAP_FACTOR: f64 = 3.0;

/// Slack applied to the travel threshold so accumulated floating point
/// error cannot skip a node that lands exactly on the step.
const TRIGGER_SLACK: f64 = 1e-9;

/// Quality tag attached to each satellite fix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsMode {
    /// Carrier-phase fix, centimetre grade.
    Rtk,
    /// Precise point positioning fallback, decimetre to metre grade.
    Ppp,
}

impl GpsMode {
    /// Tag used in the log format.
    pub fn name(&self) -> &'static str {
        match self {
            GpsMode::Rtk => "RTK",
            GpsMode::Ppp => "PPP",
        }
    }

    /// Inverse of [`GpsMode::name`].
    pub fn from_name(name: &str) -> Option<GpsMode> {
        match name {
            "RTK" => Some(GpsMode::Rtk),
            "PPP" => Some(GpsMode::Ppp),
            _ => None,
        }
    }
}

/// One wheel odometry reading: planar motion since the previous reading,
/// expressed in the frame at the start of the interval.
#[derive(Debug, Clone, PartialEq)]
pub struct WoReading {
    /// Time of the end of the interval, seconds.
    pub stamp: f64,
    /// Forward, lateral, and heading increments `(dx, dy, dyaw)`.
    pub delta: Vector3<f64>,
    /// Covariance of the increment per unit of planar motion.
    pub cov: Matrix3<f64>,
}

/// One visual or lidar odometry reading: full rigid motion since the
/// previous reading of the same stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseReading {
    /// Time of the end of the interval, seconds.
    pub stamp: f64,
    /// Relative pose as translation plus axis-angle.
    pub delta: Vector6<f64>,
    /// Covariance of the relative pose over this reading's interval.
    pub cov: Matrix6<f64>,
}

/// One satellite fix in the field frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsReading {
    /// Fix time, seconds.
    pub stamp: f64,
    /// Antenna position.
    pub position: Vector3<f64>,
    /// Position covariance.
    pub cov: Matrix3<f64>,
    /// Fix quality.
    pub mode: GpsMode,
}

/// One attitude reading from the inertial unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuReading {
    /// Reading time, seconds.
    pub stamp: f64,
    /// Roll and pitch components of the axis-angle attitude.
    pub rollpitch: Vector2<f64>,
    /// Covariance of the two components.
    pub cov: Matrix2<f64>,
}

/// A recorded drive: every stream sorted by stamp, possibly empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorLog {
    /// Wheel odometry increments.
    pub wo: Vec<WoReading>,
    /// Visual odometry increments.
    pub vo: Vec<PoseReading>,
    /// Lidar odometry increments.
    pub lid: Vec<PoseReading>,
    /// Satellite fixes.
    pub gps: Vec<GpsReading>,
    /// Attitude readings.
    pub imu: Vec<ImuReading>,
}

/// Failure modes of log parsing and pipeline runs.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// A run needs at least one wheel odometry reading to place nodes.
    #[error("wheel odometry stream is empty")]
    EmptyWoStream,
    /// A stream's stamps must not decrease.
    #[error("{stream} stream stamps decrease at index {index}")]
    UnsortedStream {
        /// Stream tag.
        stream: &'static str,
        /// Index of the offending reading.
        index: usize,
    },
    /// The initial trajectory handed to a batch run has the wrong length.
    #[error("initial trajectory has {got} states but the graph has {want} nodes")]
    InitialLengthMismatch {
        /// States provided.
        got: usize,
        /// Nodes in the graph.
        want: usize,
    },
    /// The solver gave up while optimizing a window.
    #[error("solver failed at node {node}")]
    Solver {
        /// Newest node of the failed window.
        node: usize,
        /// Underlying solver error.
        #[source]
        source: SolverError,
    },
    /// Graph construction rejected a node or factor.
    #[error(transparent)]
    Graph(#[from] GraphError),
    /// A log or graph line could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse {
        /// One-based line number.
        line: usize,
        /// What went wrong.
        message: String,
    },
    /// File system failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SensorLog {
    /// Empty log.
    pub fn new() -> SensorLog {
        SensorLog::default()
    }

    /// Checks that every stream is sorted by stamp.
    pub fn validate(&self) -> Result<(), PipelineError> {
        fn check(
            stream: &'static str,
            stamps: impl Iterator<Item = f64>,
        ) -> Result<(), PipelineError> {
            let mut last = f64::NEG_INFINITY;
            for (index, s) in stamps.enumerate() {
                if s < last {
                    return Err(PipelineError::UnsortedStream { stream, index });
                }
                last = s;
            }
            Ok(())
        }
        check("WO", self.wo.iter().map(|r| r.stamp))?;
        check("VO", self.vo.iter().map(|r| r.stamp))?;
        check("LID", self.lid.iter().map(|r| r.stamp))?;
        check("GPS", self.gps.iter().map(|r| r.stamp))?;
        check("IMU", self.imu.iter().map(|r| r.stamp))?;
        Ok(())
    }

    /// Serializes the log to the line format read by [`SensorLog::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.wo {
            write!(out, "WO {}", r.stamp).unwrap();
            for v in r.delta.iter() {
                write!(out, " {v}").unwrap();
            }
            for v in row_major(r.cov.as_slice(), 3) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        for (tag, stream) in [("VO", &self.vo), ("LID", &self.lid)] {
            for r in stream {
                write!(out, "{tag} {}", r.stamp).unwrap();
                for v in r.delta.iter() {
                    write!(out, " {v}").unwrap();
                }
                for v in row_major(r.cov.as_slice(), 6) {
                    write!(out, " {v}").unwrap();
                }
                out.push('\n');
            }
        }
        for r in &self.gps {
            write!(out, "GPS {}", r.stamp).unwrap();
            for v in r.position.iter() {
                write!(out, " {v}").unwrap();
            }
            for v in row_major(r.cov.as_slice(), 3) {
                write!(out, " {v}").unwrap();
            }
            writeln!(out, " {}", r.mode.name()).unwrap();
        }
        for r in &self.imu {
            write!(out, "IMU {}", r.stamp).unwrap();
            for v in r.rollpitch.iter() {
                write!(out, " {v}").unwrap();
            }
            for v in row_major(r.cov.as_slice(), 2) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses a log from its line format. One reading per line:
    ///
    /// ```text
    /// WO  <stamp> <dx> <dy> <dyaw> <9 covariance values, row major>
    /// VO  <stamp> <6 pose values> <36 covariance values, row major>
    /// LID <stamp> <6 pose values> <36 covariance values, row major>
    /// GPS <stamp> <x> <y> <z> <9 covariance values, row major> <RTK|PPP>
    /// IMU <stamp> <roll> <pitch> <4 covariance values, row major>
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored. Lines with an
    /// unknown tag are skipped with a warning on standard error.
    pub fn from_text(text: &str) -> Result<SensorLog, PipelineError> {
        let mut log = SensorLog::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split_ascii_whitespace();
            let tag = fields.next().unwrap();
            let rest: Vec<&str> = fields.collect();
            match tag {
                "WO" => {
                    let v = parse_floats(&rest, 13, line)?;
                    log.wo.push(WoReading {
                        stamp: v[0],
                        delta: Vector3::new(v[1], v[2], v[3]),
                        cov: Matrix3::from_row_slice(&v[4..13]),
                    });
                }
                "VO" | "LID" => {
                    let v = parse_floats(&rest, 43, line)?;
                    let reading = PoseReading {
                        stamp: v[0],
                        delta: Vector6::from_row_slice(&v[1..7]),
                        cov: Matrix6::from_row_slice(&v[7..43]),
                    };
                    if tag == "VO" {
                        log.vo.push(reading);
                    } else {
                        log.lid.push(reading);
                    }
                }
                "GPS" => {
                    if rest.len() != 14 {
                        return Err(PipelineError::Parse {
                            line,
                            message: format!("expected 14 fields after GPS, got {}", rest.len()),
                        });
                    }
                    let v = parse_floats(&rest[..13], 13, line)?;
                    let mode =
                        GpsMode::from_name(rest[13]).ok_or_else(|| PipelineError::Parse {
                            line,
                            message: format!("unknown fix mode {:?}", rest[13]),
                        })?;
                    log.gps.push(GpsReading {
                        stamp: v[0],
                        position: Vector3::new(v[1], v[2], v[3]),
                        cov: Matrix3::from_row_slice(&v[4..13]),
                        mode,
                    });
                }
                "IMU" => {
                    let v = parse_floats(&rest, 7, line)?;
                    log.imu.push(ImuReading {
                        stamp: v[0],
                        rollpitch: Vector2::new(v[1], v[2]),
                        cov: Matrix2::from_row_slice(&v[3..7]),
                    });
                }
                other => {
                    eprintln!("warning: skipping line {line} with unknown tag {other:?}");
                }
            }
        }
        log.validate()?;
        Ok(log)
    }

    /// Reads a log file.
    pub fn read_file(path: &Path) -> Result<SensorLog, PipelineError> {
        SensorLog::from_text(&std::fs::read_to_string(path)?)
    }

    /// Writes the log to a file.
    pub fn write_file(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Column-major slice reordered row by row for serialization.
fn row_major(col_major: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(col_major[c * n + r]);
        }
    }
    out
}

/// Parses exactly `want` floats from whitespace-split fields.
fn parse_floats(fields: &[&str], want: usize, line: usize) -> Result<Vec<f64>, PipelineError> {
    if fields.len() != want {
        return Err(PipelineError::Parse {
            line,
            message: format!("expected {want} numeric fields, got {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| PipelineError::Parse {
                line,
                message: format!("bad float {f:?}"),
            })
        })
        .collect()
}

/// Everything a run needs besides the log itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Planar travel between consecutive nodes, metres.
    pub step_wo: f64,
    /// When false the online run optimizes the full graph at every node
    /// instead of a sliding window.
    pub window: bool,
    /// Minimum window size in nodes before cross-row expansion.
    pub w_min: usize,
    /// Spacing between crop rows, metres. Sets the smoothness search radius.
    pub row_spacing: f64,
    /// Which cues contribute factors.
    pub cues: BTreeSet<FactorKind>,
    /// Information matrix construction parameters.
    pub weights: WeightParams,
    /// Optimizer settings.
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            step_wo: 0.3,
            window: true,
            w_min: 20,
            row_spacing: 1.5,
            cues: FactorKind::all().iter().copied().collect(),
            weights: WeightParams::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Sample of the wheel odometry stream at one instant.
#[derive(Debug, Clone)]
pub struct WoSample {
    /// Dead-reckoned planar pose `(x, y, yaw)` accumulated from the start
    /// of the stream.
    pub pose: Vector3<f64>,
    /// Cumulative planar arc length up to the sample time.
    pub arc: f64,
    /// Cumulative unsigned heading change up to the sample time.
    pub turn: f64,
    /// Per-unit-motion covariance of the nearest reading.
    pub cov: Matrix3<f64>,
}

/// Sample of a rigid odometry stream at one instant.
#[derive(Debug, Clone)]
pub struct PoseSample {
    /// Dead-reckoned pose accumulated from the start of the stream.
    pub pose: Transform,
    /// Covariance of the nearest reading.
    pub cov: Matrix6<f64>,
    /// Typical interval covered by one reading, seconds.
    pub period: f64,
}

/// Sample of the satellite stream at one instant.
#[derive(Debug, Clone)]
pub struct GpsSample {
    /// Interpolated position.
    pub position: Vector3<f64>,
    /// Covariance of the nearest fix.
    pub cov: Matrix3<f64>,
    /// Mode of the nearest fix.
    pub mode: GpsMode,
}

/// Sample of the attitude stream at one instant.
#[derive(Debug, Clone)]
pub struct ImuSample {
    /// Interpolated roll and pitch.
    pub rollpitch: Vector2<f64>,
    /// Covariance of the nearest reading.
    pub cov: Matrix2<f64>,
}

/// All streams sampled at a common stamp. A stream is `None` when the stamp
/// falls outside its span or inside a gap longer than three typical periods.
#[derive(Debug, Clone, Default)]
pub struct Synced {
    /// Wheel odometry sample.
    pub wo: Option<WoSample>,
    /// Visual odometry sample.
    pub vo: Option<PoseSample>,
    /// Lidar odometry sample.
    pub lid: Option<PoseSample>,
    /// Satellite sample.
    pub gps: Option<GpsSample>,
    /// Attitude sample.
    pub imu: Option<ImuSample>,
}

/// Cumulative curve of one planar odometry stream: entry `k` is the pose,
/// arc length, and heading change after applying reading `k`.
#[derive(Debug, Clone)]
struct PlanarCurve {
    stamps: Vec<f64>,
    poses: Vec<Vector3<f64>>,
    arcs: Vec<f64>,
    turns: Vec<f64>,
    max_gap: f64,
}

impl PlanarCurve {
    fn new(readings: &[WoReading]) -> Option<PlanarCurve> {
        if readings.is_empty() {
            return None;
        }
        let mut poses = Vec::with_capacity(readings.len());
        let mut arcs = Vec::with_capacity(readings.len());
        let mut turns = Vec::with_capacity(readings.len());
        let mut pose = Vector3::<f64>::zeros();
        let mut arc = 0.0;
        let mut turn = 0.0;
        for r in readings {
            let (s, c) = pose.z.sin_cos();
            pose.x += c * r.delta.x - s * r.delta.y;
            pose.y += s * r.delta.x + c * r.delta.y;
            pose.z += r.delta.z;
            arc += r.delta.xy().norm();
            turn += r.delta.z.abs();
            poses.push(pose);
            arcs.push(arc);
            turns.push(turn);
        }
        let stamps: Vec<f64> = readings.iter().map(|r| r.stamp).collect();
        Some(PlanarCurve {
            max_gap: GAP_FACTOR * typical_period(&stamps),
            stamps,
            poses,
            arcs,
            turns,
        })
    }

    fn sample(&self, readings: &[WoReading], stamp: f64) -> Option<WoSample> {
        let (lo, hi, alpha) = bracket(&self.stamps, stamp, self.max_gap)?;
        let cov = readings[nearest(lo, hi, alpha)].cov;
        if lo == hi {
            return Some(WoSample {
                pose: self.poses[lo],
                arc: self.arcs[lo],
                turn: self.turns[lo],
                cov,
            });
        }
        let a = self.poses[lo];
        let b = self.poses[hi];
        let pose = Vector3::new(
            a.x + alpha * (b.x - a.x),
            a.y + alpha * (b.y - a.y),
            a.z + alpha * (b.z - a.z),
        );
        Some(WoSample {
            pose,
            arc: self.arcs[lo] + alpha * (self.arcs[hi] - self.arcs[lo]),
            turn: self.turns[lo] + alpha * (self.turns[hi] - self.turns[lo]),
            cov,
        })
    }
}

/// Cumulative curve of one rigid odometry stream.
#[derive(Debug, Clone)]
struct RigidCurve {
    stamps: Vec<f64>,
    poses: Vec<Pose6D>,
    period: f64,
    max_gap: f64,
}

impl RigidCurve {
    fn new(readings: &[PoseReading]) -> Option<RigidCurve> {
        if readings.is_empty() {
            return None;
        }
        let mut poses = Vec::with_capacity(readings.len());
        let mut acc = Transform::identity();
        for r in readings {
            acc = acc.compose(&Pose6D::from_vector(&r.delta).to_transform());
            poses.push(pose_of(&acc));
        }
        let stamps: Vec<f64> = readings.iter().map(|r| r.stamp).collect();
        let period = typical_period(&stamps);
        Some(RigidCurve {
            max_gap: GAP_FACTOR * period,
            stamps,
            poses,
            period,
        })
    }

    fn sample(&self, readings: &[PoseReading], stamp: f64) -> Option<PoseSample> {
        let (lo, hi, alpha) = bracket(&self.stamps, stamp, self.max_gap)?;
        let cov = readings[nearest(lo, hi, alpha)].cov;
        let pose = if lo == hi {
            self.poses[lo]
        } else {
            interp_pose(&self.poses[lo], &self.poses[hi], alpha)
                .expect("bracket keeps alpha within [0, 1]")
        };
        Some(PoseSample {
            pose: pose.to_transform(),
            cov,
            period: self.period,
        })
    }
}

/// Minimal vector form of a transform.
fn pose_of(t: &Transform) -> Pose6D {
    Pose6D::from_vector(&phi(t))
}

/// Precomputed interpolation state for one log. Sampling through this is
/// O(log n) per call; [`synchronize`] rebuilds it each time for convenience.
#[derive(Debug, Clone)]
pub struct LogCurves {
    wo: Option<PlanarCurve>,
    vo: Option<RigidCurve>,
    lid: Option<RigidCurve>,
    gps_gap: f64,
    imu_gap: f64,
}

impl LogCurves {
    /// Accumulates the odometry streams of `log`.
    pub fn new(log: &SensorLog) -> LogCurves {
        let gps_stamps: Vec<f64> = log.gps.iter().map(|r| r.stamp).collect();
        let imu_stamps: Vec<f64> = log.imu.iter().map(|r| r.stamp).collect();
        LogCurves {
            wo: PlanarCurve::new(&log.wo),
            vo: RigidCurve::new(&log.vo),
            lid: RigidCurve::new(&log.lid),
            gps_gap: GAP_FACTOR * typical_period(&gps_stamps),
            imu_gap: GAP_FACTOR * typical_period(&imu_stamps),
        }
    }

    /// Samples every stream of `log` at `stamp`.
    pub fn sample(&self, log: &SensorLog, stamp: f64) -> Synced {
        let gps = {
            let stamps: Vec<f64> = log.gps.iter().map(|r| r.stamp).collect();
            bracket(&stamps, stamp, self.gps_gap).map(|(lo, hi, alpha)| {
                let near = &log.gps[nearest(lo, hi, alpha)];
                let position =
                    log.gps[lo].position + alpha * (log.gps[hi].position - log.gps[lo].position);
                GpsSample {
                    position,
                    cov: near.cov,
                    mode: near.mode,
                }
            })
        };
        let imu = {
            let stamps: Vec<f64> = log.imu.iter().map(|r| r.stamp).collect();
            bracket(&stamps, stamp, self.imu_gap).map(|(lo, hi, alpha)| {
                let near = &log.imu[nearest(lo, hi, alpha)];
                let rollpitch = log.imu[lo].rollpitch
                    + alpha * (log.imu[hi].rollpitch - log.imu[lo].rollpitch);
                ImuSample {
                    rollpitch,
                    cov: near.cov,
                }
            })
        };
        Synced {
            wo: self.wo.as_ref().and_then(|c| c.sample(&log.wo, stamp)),
            vo: self.vo.as_ref().and_then(|c| c.sample(&log.vo, stamp)),
            lid: self.lid.as_ref().and_then(|c| c.sample(&log.lid, stamp)),
            gps,
            imu,
        }
    }
}

/// Samples every stream of `log` at `stamp`.
///
/// Absolute streams interpolate linearly between the bracketing readings
/// and copy covariance and mode from the nearer one; a stamp equal to a
/// reading's stamp returns that reading verbatim. Odometry streams are
/// first accumulated into dead-reckoned curves so that the difference of
/// two samples is the relative motion between their stamps, with rotations
/// interpolated along the geodesic. Streams whose span excludes the stamp
/// report `None`.
pub fn synchronize(log: &SensorLog, stamp: f64) -> Synced {
    LogCurves::new(log).sample(log, stamp)
}

/// Typical spacing between consecutive stamps, from the stream's extent.
fn typical_period(stamps: &[f64]) -> f64 {
    if stamps.len() < 2 {
        return f64::INFINITY;
    }
    (stamps[stamps.len() - 1] - stamps[0]) / (stamps.len() - 1) as f64
}

/// Indices bracketing `stamp` plus the interpolation fraction, or `None`
/// when the stamp is outside the span or the bracket exceeds `max_gap`.
fn bracket(stamps: &[f64], stamp: f64, max_gap: f64) -> Option<(usize, usize, f64)> {
    if stamps.is_empty() || stamp < stamps[0] || stamp > stamps[stamps.len() - 1] {
        return None;
    }
    let hi = stamps.partition_point(|&s| s < stamp);
    if hi < stamps.len() && stamps[hi] == stamp {
        return Some((hi, hi, 0.0));
    }
    let lo = hi - 1;
    let span = stamps[hi] - stamps[lo];
    if span > max_gap {
        return None;
    }
    let alpha = if span > 0.0 {
        (stamp - stamps[lo]) / span
    } else {
        0.0
    };
    Some((lo, hi, alpha))
}

/// Index of the bracket endpoint closer to the sample.
fn nearest(lo: usize, hi: usize, alpha: f64) -> usize {
    if alpha <= 0.5 {
        lo
    } else {
        hi
    }
}

/// Node stamps for a log: the first wheel odometry stamp, then one stamp
/// each time the planar travel accumulated since the last node reaches
/// `cfg.step_wo`. A stationary log yields exactly one node.
pub fn trigger_nodes(log: &SensorLog, cfg: &PipelineConfig) -> Vec<f64> {
    let mut stamps = Vec::new();
    let mut acc = 0.0;
    for (k, r) in log.wo.iter().enumerate() {
        if k == 0 {
            stamps.push(r.stamp);
            continue;
        }
        acc += r.delta.xy().norm();
        if acc >= cfg.step_wo - TRIGGER_SLACK {
            stamps.push(r.stamp);
            acc = 0.0;
        }
    }
    stamps
}

/// Measurements attached to one node, derived from the synchronized
/// samples at the node's stamp and at the previous node's stamp.
#[derive(Debug, Clone, Default)]
pub struct NodeContext {
    /// Planar wheel increment over the interval plus per-unit covariance,
    /// traveled distance, and traveled rotation.
    pub wo: Option<(Vector3<f64>, Matrix3<f64>, f64, f64)>,
    /// Visual increment over the interval plus interval covariance.
    pub vo: Option<(Vector6<f64>, Matrix6<f64>)>,
    /// Lidar increment over the interval plus interval covariance.
    pub lid: Option<(Vector6<f64>, Matrix6<f64>)>,
    /// Position fix at the node's stamp.
    pub gps: Option<(Vector3<f64>, Matrix3<f64>, GpsMode)>,
    /// Attitude at the node's stamp.
    pub imu: Option<(Vector2<f64>, Matrix2<f64>)>,
}

/// Relative planar pose from sample `a` to sample `b`.
fn planar_diff(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = a.z.sin_cos();
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    Vector3::new(
        c * dx + s * dy,
        -s * dx + c * dy,
        wrap_angle_pi(b.z - a.z),
    )
}

/// Wraps an angle into `(-pi, pi]`.
fn wrap_angle_pi(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Builds the measurement set for the node at `stamp`. `prev` holds the
/// samples at the previous node's stamp, absent for the first node.
/// Odometry increments are the differences of the dead-reckoned curves;
/// interval covariances scale the nearest reading's covariance by the
/// ratio of interval length to reading period.
pub fn interval_readings(prev: Option<&Synced>, now: &Synced, duration: f64) -> NodeContext {
    let mut ctx = NodeContext::default();
    ctx.gps = now
        .gps
        .as_ref()
        .map(|g| (g.position, g.cov, g.mode));
    ctx.imu = now.imu.as_ref().map(|m| (m.rollpitch, m.cov));
    let Some(prev) = prev else {
        return ctx;
    };
    if let (Some(a), Some(b)) = (prev.wo.as_ref(), now.wo.as_ref()) {
        ctx.wo = Some((
            planar_diff(&a.pose, &b.pose),
            b.cov,
            b.arc - a.arc,
            b.turn - a.turn,
        ));
    }
    for (slot, pair) in [
        (&mut ctx.vo, (prev.vo.as_ref(), now.vo.as_ref())),
        (&mut ctx.lid, (prev.lid.as_ref(), now.lid.as_ref())),
    ] {
        if let (Some(a), Some(b)) = pair {
            let rel = relative(&a.pose, &b.pose);
            let scale = if b.period.is_finite() && b.period > 0.0 {
                (duration / b.period).max(1.0)
            } else {
                1.0
            };
            *slot = Some((phi(&rel), b.cov * scale));
        }
    }
    ctx
}

/// Adds every enabled factor for node `id` to the graph and returns the
/// factors added. `id` must already hold its initial state estimate; the
/// smoothness and terrain factors read it.
pub fn assemble_node(
    g: &mut PoseGraph,
    id: usize,
    ctx: &NodeContext,
    dem: Option<&DemGrid>,
    cfg: &PipelineConfig,
) -> Result<Vec<Factor>, PipelineError> {
    let mut added = Vec::new();
    if cfg.cues.contains(&FactorKind::Gps) {
        if let Some((position, cov, _)) = &ctx.gps {
            added.push(build_gps_factor(id, position, cov).map_err(bad_covariance)?);
        }
    }
    if cfg.cues.contains(&FactorKind::Imu) {
        if let Some((rollpitch, cov)) = &ctx.imu {
            added.push(
                build_imu_factor(id, rollpitch.x, rollpitch.y, cov).map_err(bad_covariance)?,
            );
        }
    }
    if cfg.cues.contains(&FactorKind::Dem) {
        if let Some(dem) = dem {
            if let Some(f) = build_dem_factor(id, g.state(id), dem, &cfg.weights) {
                added.push(f);
            }
        }
    }
    if let Some(prev) = id.checked_sub(1) {
        if cfg.cues.contains(&FactorKind::Wo) {
            if let Some((delta, cov, dist, rot)) = &ctx.wo {
                let info = build_wo_info(cov, *dist, *rot).map_err(bad_covariance)?;
                added.push(Factor {
                    kind: FactorKind::Wo,
                    node_i: prev,
                    node_j: Some(id),
                    z: Vector6::new(delta.x, delta.y, 0.0, 0.0, 0.0, delta.z),
                    info,
                });
            }
        }
        if cfg.cues.contains(&FactorKind::Vo) {
            if let Some((z, cov)) = &ctx.vo {
                let scale = match &ctx.wo {
                    Some((d, _, _, _)) => {
                        let wo_pose = Pose6D::new(
                            Vector3::new(d.x, d.y, 0.0),
                            Vector3::new(0.0, 0.0, d.z),
                        );
                        vo_failure_scale(&wo_pose, &Pose6D::from_vector(z), &cfg.weights)
                    }
                    None => 1.0,
                };
                let sigma_t = cov.fixed_view::<3, 3>(0, 0).into_owned();
                let sigma_r = cov.fixed_view::<3, 3>(3, 3).into_owned();
                let info = build_vo_info(&sigma_t, &sigma_r, &cfg.weights)
                    .map_err(bad_covariance)?
                    * scale;
                added.push(Factor {
                    kind: FactorKind::Vo,
                    node_i: prev,
                    node_j: Some(id),
                    z: *z,
                    info,
                });
            }
        }
        if cfg.cues.contains(&FactorKind::Lid) {
            if let Some((z, cov)) = &ctx.lid {
                added.push(build_lid_factor(prev, id, *z, cov).map_err(bad_covariance)?);
            }
        }
        if cfg.cues.contains(&FactorKind::Amm) {
            let rel = relative(
                &g.state(prev).to_transform(),
                &g.state(id).to_transform(),
            );
            let dist = match &ctx.wo {
                Some((_, _, dist, _)) => *dist,
                None => rel.translation().xy().norm(),
            };
            added.push(Factor {
                kind: FactorKind::Amm,
                node_i: prev,
                node_j: Some(id),
                z: phi(&rel),
                info: build_amm_info(dist),
            });
        }
    }
    if cfg.cues.contains(&FactorKind::Mrf) {
        for nb in g.mrf_neighbors(id) {
            if !g.mrf_edge_exists(id, nb) {
                added.push(build_mrf_factor(id, nb, g.state(id), g.state(nb), &cfg.weights));
            }
        }
    }
    for f in &added {
        g.add_factor(f.clone())?;
    }
    Ok(added)
}

/// Maps a degenerate measurement covariance onto a data error.
fn bad_covariance(err: crate::factors::FactorError) -> PipelineError {
    PipelineError::Parse {
        line: 0,
        message: err.to_string(),
    }
}

/// Ids optimized when node `newest` has just been added: the last `w_min`
/// nodes, extended backwards to the smallest cross-row smoothness partner
/// of any node in that range. The one-hop extension pulls in the adjacent
/// stretch of the previous row without cascading into rows before it.
pub fn window_extent(g: &PoseGraph, newest: usize, w_min: usize) -> BTreeSet<usize> {
    let base = newest.saturating_sub(w_min.saturating_sub(1));
    let mut k = base;
    for m in base..=newest {
        for nb in g.mrf_partners(m) {
            if nb < k && !is_temporal(m, nb) {
                k = nb;
            }
        }
    }
    (k..=newest).collect()
}

/// True for smoothness edges linking consecutive nodes along the path.
fn is_temporal(i: usize, j: usize) -> bool {
    i.abs_diff(j) <= 1
}

/// Output of a pipeline run.
#[derive(Debug)]
pub struct RunResult {
    /// Final graph with optimized states.
    pub graph: PoseGraph,
    /// One report per solver invocation.
    pub reports: Vec<SolveReport>,
}

impl RunResult {
    /// Stamped states of every node, in id order.
    pub fn trajectory(&self) -> Vec<(f64, Pose6D)> {
        self.graph
            .nodes()
            .iter()
            .map(|n| (n.stamp, n.state))
            .collect()
    }
}

/// State estimate for the first node: first fix position if available plus
/// attitude roll and pitch, with zero yaw.
fn initial_state(synced: &Synced) -> Pose6D {
    let t = synced
        .gps
        .as_ref()
        .map_or_else(Vector3::zeros, |g| g.position);
    let r = synced
        .imu
        .as_ref()
        .map_or_else(Vector3::zeros, |m| Vector3::new(m.rollpitch.x, m.rollpitch.y, 0.0));
    Pose6D::new(t, r)
}

/// Previous state advanced by the interval's planar wheel increment.
fn dead_reckon(prev: &Pose6D, ctx: &NodeContext) -> Pose6D {
    match &ctx.wo {
        Some((d, _, _, _)) => {
            let step = Transform::from_parts(
                rot_exp(&Vector3::new(0.0, 0.0, d.z)),
                Vector3::new(d.x, d.y, 0.0),
            );
            pose_of(&prev.to_transform().compose(&step))
        }
        None => *prev,
    }
}

/// Per-node inputs derived once from the log: node stamps, measurement
/// contexts, and the first node's state estimate.
struct Prepared {
    stamps: Vec<f64>,
    contexts: Vec<NodeContext>,
    first: Pose6D,
}

/// Validates the log, triggers node stamps, and synchronizes every stream
/// at each of them.
fn prepare(log: &SensorLog, cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    log.validate()?;
    if log.wo.is_empty() {
        return Err(PipelineError::EmptyWoStream);
    }
    let stamps = trigger_nodes(log, cfg);
    let curves = LogCurves::new(log);
    let mut contexts = Vec::with_capacity(stamps.len());
    let mut first = Pose6D::identity();
    let mut synced_prev: Option<Synced> = None;
    let mut prev_stamp = 0.0;
    for (id, &stamp) in stamps.iter().enumerate() {
        let now = curves.sample(log, stamp);
        let duration = if id == 0 { 0.0 } else { stamp - prev_stamp };
        contexts.push(interval_readings(synced_prev.as_ref(), &now, duration));
        if id == 0 {
            first = initial_state(&now);
        }
        synced_prev = Some(now);
        prev_stamp = stamp;
    }
    Ok(Prepared {
        stamps,
        contexts,
        first,
    })
}

/// Incremental run: triggers nodes from wheel travel, assembles factors
/// for each, and optimizes the sliding window as the graph grows. Nodes
/// outside the window keep their last optimized state and rejoin when a
/// later window reaches back across the adjacent row. The first node is
/// frozen as the gauge anchor only when satellite fixes are disabled.
pub fn run_online(
    log: &SensorLog,
    dem: Option<&DemGrid>,
    cfg: &PipelineConfig,
) -> Result<RunResult, PipelineError> {
    let p = prepare(log, cfg)?;
    let mut g = PoseGraph::new(2.0 * cfg.row_spacing);
    let mut reports = Vec::with_capacity(p.stamps.len());
    let anchor_first = !cfg.cues.contains(&FactorKind::Gps);
    for (id, &stamp) in p.stamps.iter().enumerate() {
        let init = if id == 0 {
            p.first
        } else {
            dead_reckon(g.state(id - 1), &p.contexts[id])
        };
        g.add_node(stamp, init, None)?;
        assemble_node(&mut g, id, &p.contexts[id], dem, cfg)?;
        if id == 0 && anchor_first {
            g.freeze_below(1);
        }
        let window: BTreeSet<usize> = if cfg.window {
            window_extent(&g, id, cfg.w_min)
        } else {
            (0..=id).collect()
        };
        let report = lm_optimize(&mut g, &window, &cfg.solver)
            .map_err(|source| PipelineError::Solver { node: id, source })?;
        reports.push(report);
    }
    Ok(RunResult { graph: g, reports })
}

/// Whole-log run: builds the full graph, initializes it from `initial`
/// when given (length must match the node count) or by dead reckoning
/// otherwise, and optimizes all nodes. The first node is frozen as the
/// gauge anchor only when no satellite factor fixes the global frame.
pub fn run_batch(
    log: &SensorLog,
    dem: Option<&DemGrid>,
    cfg: &PipelineConfig,
    initial: Option<&[Pose6D]>,
) -> Result<RunResult, PipelineError> {
    let p = prepare(log, cfg)?;
    if let Some(initial) = initial {
        if initial.len() != p.stamps.len() {
            return Err(PipelineError::InitialLengthMismatch {
                got: initial.len(),
                want: p.stamps.len(),
            });
        }
    }
    let mut g = PoseGraph::new(2.0 * cfg.row_spacing);
    for (id, &stamp) in p.stamps.iter().enumerate() {
        let state = match initial {
            Some(initial) => initial[id],
            None if id == 0 => p.first,
            None => dead_reckon(g.state(id - 1), &p.contexts[id]),
        };
        g.add_node(stamp, state, None)?;
    }
    for id in 0..g.len() {
        assemble_node(&mut g, id, &p.contexts[id], dem, cfg)?;
    }
    let has_gps = g.factors().iter().any(|f| f.kind == FactorKind::Gps);
    if !has_gps {
        g.freeze_below(1.min(g.len()));
    }
    let active: BTreeSet<usize> = (0..g.len()).collect();
    let last = g.len().saturating_sub(1);
    let report = lm_optimize(&mut g, &active, &cfg.solver)
        .map_err(|source| PipelineError::Solver { node: last, source })?;
    Ok(RunResult {
        graph: g,
        reports: vec![report],
    })
}

/// Writes a graph to its line format:
///
/// ```text
/// NODE <id> <stamp> <6 state values>
/// FACTOR <kind> <i> [<j>] <6 measurement values> <36 information values, row major>
/// ```
///
/// Values are printed with 17 significant digits so a read back is
/// bit-exact.
pub fn write_graph(g: &PoseGraph, path: &Path) -> Result<(), PipelineError> {
    std::fs::write(path, graph_to_text(g))?;
    Ok(())
}

/// See [`write_graph`].
pub fn graph_to_text(g: &PoseGraph) -> String {
    let mut out = String::new();
    for n in g.nodes() {
        write!(out, "NODE {} {:.16e}", n.id, n.stamp).unwrap();
        for v in n.state.to_vector().iter() {
            write!(out, " {v:.16e}").unwrap();
        }
        out.push('\n');
    }
    for f in g.factors() {
        write!(out, "FACTOR {} {}", f.kind.name(), f.node_i).unwrap();
        if let Some(j) = f.node_j {
            write!(out, " {j}").unwrap();
        }
        for v in f.z.iter() {
            write!(out, " {v:.16e}").unwrap();
        }
        for v in row_major(f.info.as_slice(), 6) {
            write!(out, " {v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Reads a graph written by [`write_graph`].
pub fn read_graph(path: &Path) -> Result<PoseGraph, PipelineError> {
    graph_from_text(&std::fs::read_to_string(path)?)
}

/// See [`read_graph`].
pub fn graph_from_text(text: &str) -> Result<PoseGraph, PipelineError> {
    let mut g = PoseGraph::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_ascii_whitespace();
        let tag = fields.next().unwrap();
        let rest: Vec<&str> = fields.collect();
        match tag {
            "NODE" => {
                let v = parse_floats(&rest[1..], 7, line)?;
                let id: usize = rest[0].parse().map_err(|_| PipelineError::Parse {
                    line,
                    message: format!("bad node id {:?}", rest[0]),
                })?;
                if id != g.len() {
                    return Err(PipelineError::Parse {
                        line,
                        message: format!("node id {id} out of order, expected {}", g.len()),
                    });
                }
                let state = Pose6D::from_vector(&Vector6::from_row_slice(&v[1..7]));
                g.add_node(v[0], state, None)?;
            }
            "FACTOR" => {
                if rest.len() < 2 {
                    return Err(PipelineError::Parse {
                        line,
                        message: "truncated factor line".to_string(),
                    });
                }
                let kind =
                    FactorKind::from_name(rest[0]).ok_or_else(|| PipelineError::Parse {
                        line,
                        message: format!("unknown factor kind {:?}", rest[0]),
                    })?;
                let ids = if kind.is_binary() { 2 } else { 1 };
                if rest.len() != 1 + ids + 42 {
                    return Err(PipelineError::Parse {
                        line,
                        message: format!(
                            "expected {} fields for {} factor, got {}",
                            1 + ids + 42,
                            kind.name(),
                            rest.len()
                        ),
                    });
                }
                let parse_id = |s: &str| -> Result<usize, PipelineError> {
                    s.parse().map_err(|_| PipelineError::Parse {
                        line,
                        message: format!("bad node id {s:?}"),
                    })
                };
                let node_i = parse_id(rest[1])?;
                let node_j = if ids == 2 { Some(parse_id(rest[2])?) } else { None };
                let v = parse_floats(&rest[1 + ids..], 42, line)?;
                g.add_factor(Factor {
                    kind,
                    node_i,
                    node_j,
                    z: Vector6::from_row_slice(&v[..6]),
                    info: Matrix6::from_row_slice(&v[6..42]),
                })?;
            }
            other => {
                eprintln!("warning: skipping line {line} with unknown tag {other:?}");
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PoseGraph;
    use approx::assert_relative_eq;

    /// Noise-free straight drive along +x at 0.5 m/s. Wheel odometry at
    /// 10 Hz, visual odometry at 5 Hz, fixes at 2 Hz, attitude at 10 Hz.
    fn straight_log(seconds: f64) -> SensorLog {
        let mut log = SensorLog::new();
        let wo_cov = Matrix3::identity() * 1e-6;
        let vo_cov = Matrix6::identity() * 1e-6;
        let gps_cov = Matrix3::identity() * 1e-4;
        let imu_cov = Matrix2::identity() * 1e-6;
        let steps = (seconds * 10.0).round() as usize;
        for k in 0..=steps {
            let stamp = k as f64 * 0.1;
            log.wo.push(WoReading {
                stamp,
                delta: if k == 0 {
                    Vector3::zeros()
                } else {
                    Vector3::new(0.05, 0.0, 0.0)
                },
                cov: wo_cov,
            });
            log.imu.push(ImuReading {
                stamp,
                rollpitch: Vector2::zeros(),
                cov: imu_cov,
            });
            if k % 2 == 0 {
                log.vo.push(PoseReading {
                    stamp,
                    delta: if k == 0 {
                        Vector6::zeros()
                    } else {
                        Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0)
                    },
                    cov: vo_cov,
                });
            }
            if k % 5 == 0 {
                log.gps.push(GpsReading {
                    stamp,
                    position: Vector3::new(0.5 * stamp, 0.0, 0.0),
                    cov: gps_cov,
                    mode: GpsMode::Rtk,
                });
            }
            if k % 10 == 0 {
                log.lid.push(PoseReading {
                    stamp,
                    delta: if k == 0 {
                        Vector6::zeros()
                    } else {
                        Vector6::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0)
                    },
                    cov: vo_cov * 10.0,
                });
            }
        }
        log
    }

    /// Flat terrain grid covering the straight drive.
    fn flat_dem() -> DemGrid {
        DemGrid::new([-10.0, -10.0], 5.0, 6, 6, vec![0.0; 36]).unwrap()
    }

    fn wo_log(deltas: &[(f64, f64, f64)]) -> SensorLog {
        let mut log = SensorLog::new();
        for (k, d) in deltas.iter().enumerate() {
            log.wo.push(WoReading {
                stamp: k as f64,
                delta: Vector3::new(d.0, d.1, d.2),
                cov: Matrix3::identity() * 1e-6,
            });
        }
        log
    }

    #[test]
    fn trigger_every_third_reading() {
        let deltas: Vec<(f64, f64, f64)> =
            std::iter::repeat((0.1, 0.0, 0.0)).take(10).collect();
        let log = wo_log(&deltas);
        let stamps = trigger_nodes(&log, &PipelineConfig::default());
        assert_eq!(stamps, vec![0.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn trigger_stationary_single_node() {
        let deltas = vec![(0.0, 0.0, 0.0); 50];
        let log = wo_log(&deltas);
        let stamps = trigger_nodes(&log, &PipelineConfig::default());
        assert_eq!(stamps, vec![0.0]);
    }

    #[test]
    fn trigger_nine_meters_gives_31_nodes() {
        let mut deltas = vec![(0.0, 0.0, 0.0)];
        deltas.extend(std::iter::repeat((0.1, 0.0, 0.0)).take(90));
        let log = wo_log(&deltas);
        let stamps = trigger_nodes(&log, &PipelineConfig::default());
        assert_eq!(stamps.len(), 31);
    }

    #[test]
    fn synchronize_interpolates_fixes() {
        let mut log = SensorLog::new();
        for (stamp, x) in [(0.0, 0.0), (1.0, 1.0)] {
            log.gps.push(GpsReading {
                stamp,
                position: Vector3::new(x, 0.0, 0.0),
                cov: Matrix3::identity() * 1e-4,
                mode: GpsMode::Rtk,
            });
        }
        let s = synchronize(&log, 0.25);
        let gps = s.gps.unwrap();
        assert_relative_eq!(gps.position.x, 0.25, epsilon = 1e-15);
        assert_eq!(gps.position.y, 0.0);
        assert!(s.wo.is_none());
        assert!(s.vo.is_none());

        let exact = synchronize(&log, 1.0).gps.unwrap();
        assert_eq!(exact.position.x, 1.0);

        assert!(synchronize(&log, 1.5).gps.is_none());
        assert!(synchronize(&log, -0.5).gps.is_none());
    }

    #[test]
    fn synchronize_refuses_long_gaps() {
        let mut log = SensorLog::new();
        for stamp in [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 15.0] {
            log.gps.push(GpsReading {
                stamp,
                position: Vector3::zeros(),
                cov: Matrix3::identity(),
                mode: GpsMode::Ppp,
            });
        }
        assert!(synchronize(&log, 10.0).gps.is_none());
        assert!(synchronize(&log, 4.5).gps.is_some());
    }

    #[test]
    fn wheel_curve_differences_compose_deltas() {
        let log = wo_log(&[
            (0.0, 0.0, 0.0),
            (1.0, 0.0, 0.0),
            (0.0, 0.0, std::f64::consts::FRAC_PI_2),
            (1.0, 0.0, 0.0),
        ]);
        let a = synchronize(&log, 1.0).wo.unwrap();
        let b = synchronize(&log, 3.0).wo.unwrap();
        let d = planar_diff(&a.pose, &b.pose);
        assert_relative_eq!(d.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.z, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(b.arc - a.arc, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn interval_covariance_scales_with_duration() {
        let log = straight_log(2.0);
        let curves = LogCurves::new(&log);
        let a = curves.sample(&log, 0.0);
        let b = curves.sample(&log, 0.6);
        let ctx = interval_readings(Some(&a), &b, 0.6);
        let (z, cov) = ctx.vo.unwrap();
        assert_relative_eq!(z[0], 0.3, epsilon = 1e-12);
        // One visual reading covers 0.2 s, the interval 0.6 s.
        assert_relative_eq!(cov[(0, 0)], 3e-6, epsilon = 1e-18);
    }

    #[test]
    fn assemble_covers_every_cue() {
        let log = straight_log(20.0);
        let dem = flat_dem();
        let cfg = PipelineConfig::default();
        let result = run_batch(&log, Some(&dem), &cfg, None).unwrap();
        let kinds: BTreeSet<&str> =
            result.graph.factors().iter().map(|f| f.kind.name()).collect();
        for kind in FactorKind::all() {
            assert!(kinds.contains(kind.name()), "missing {}", kind.name());
        }
    }

    #[test]
    fn cue_mask_restricts_factors() {
        let log = straight_log(5.0);
        let mut cfg = PipelineConfig::default();
        cfg.cues = [FactorKind::Gps].into_iter().collect();
        let result = run_batch(&log, None, &cfg, None).unwrap();
        assert!(!result.graph.factors().is_empty());
        assert!(result
            .graph
            .factors()
            .iter()
            .all(|f| f.kind == FactorKind::Gps));
        assert_eq!(result.graph.factors().len(), result.graph.len());
    }

    fn bare_graph(n: usize) -> PoseGraph {
        let mut g = PoseGraph::default();
        for k in 0..n {
            g.add_node(k as f64, Pose6D::identity(), None).unwrap();
        }
        g
    }

    #[test]
    fn window_small_graph_is_everything() {
        let g = bare_graph(6);
        let w = window_extent(&g, 5, 20);
        assert_eq!(w, (0..=5).collect());
    }

    #[test]
    fn window_first_row_is_last_w_min() {
        let g = bare_graph(30);
        let w = window_extent(&g, 29, 20);
        assert_eq!(w, (10..=29).collect());
    }

    #[test]
    fn window_extends_to_cross_row_partner() {
        let mut g = bare_graph(120);
        let params = WeightParams::default();
        for q in 91..=110usize {
            let f = build_mrf_factor(q, 140 - q, g.state(q), g.state(140 - q), &params);
            g.add_factor(f).unwrap();
        }
        let w = window_extent(&g, 110, 20);
        assert_eq!(w, (30..=110).collect());
    }

    #[test]
    fn online_recovers_noise_free_drive() {
        let log = straight_log(20.0);
        let result = run_online(&log, Some(&flat_dem()), &PipelineConfig::default()).unwrap();
        assert_eq!(result.reports.len(), result.graph.len());
        for n in result.graph.nodes() {
            assert_relative_eq!(n.state.t.x, 0.5 * n.stamp, epsilon = 1e-6);
            assert_relative_eq!(n.state.t.y, 0.0, epsilon = 1e-6);
            assert_relative_eq!(n.state.t.z, 0.0, epsilon = 1e-6);
            assert!(n.state.r.norm() < 1e-6);
        }
    }

    #[test]
    fn online_is_deterministic() {
        let log = straight_log(10.0);
        let cfg = PipelineConfig::default();
        let a = run_online(&log, None, &cfg).unwrap();
        let b = run_online(&log, None, &cfg).unwrap();
        for (na, nb) in a.graph.nodes().iter().zip(b.graph.nodes()) {
            assert_eq!(na.state.to_vector(), nb.state.to_vector());
        }
    }

    #[test]
    fn batch_recovers_noise_free_drive() {
        let log = straight_log(20.0);
        let result = run_batch(&log, Some(&flat_dem()), &PipelineConfig::default(), None).unwrap();
        assert_eq!(result.reports.len(), 1);
        for n in result.graph.nodes() {
            assert_relative_eq!(n.state.t.x, 0.5 * n.stamp, epsilon = 1e-6);
            assert_relative_eq!(n.state.t.y, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn batch_accepts_online_states_as_seed() {
        let log = straight_log(10.0);
        let cfg = PipelineConfig::default();
        let online = run_online(&log, None, &cfg).unwrap();
        let seed: Vec<Pose6D> = online.graph.nodes().iter().map(|n| n.state).collect();
        let batch = run_batch(&log, None, &cfg, Some(&seed)).unwrap();
        let report = &batch.reports[0];
        assert!(report.final_chi2 <= report.initial_chi2 + 1e-12);
    }

    #[test]
    fn batch_rejects_wrong_seed_length() {
        let log = straight_log(5.0);
        let seed = vec![Pose6D::identity(); 3];
        let err = run_batch(&log, None, &PipelineConfig::default(), Some(&seed)).unwrap_err();
        assert!(matches!(err, PipelineError::InitialLengthMismatch { .. }));
    }

    #[test]
    fn runs_need_wheel_odometry() {
        let log = SensorLog::new();
        let err = run_online(&log, None, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, PipelineError::EmptyWoStream));
    }

    #[test]
    fn log_text_round_trips() {
        let mut log = straight_log(1.0);
        log.gps.push(GpsReading {
            stamp: 2.0,
            position: Vector3::new(0.123456789012345, -7.25, 3.5e-9),
            cov: Matrix3::identity() * 0.7,
            mode: GpsMode::Ppp,
        });
        log.lid.push(PoseReading {
            stamp: 1.5,
            delta: Vector6::new(0.1, -0.2, 0.3, 0.01, -0.02, 0.03),
            cov: Matrix6::identity() * 1e-3,
        });
        let text = log.to_text();
        let parsed = SensorLog::from_text(&text).unwrap();
        assert_eq!(parsed, log);
    }

    #[test]
    fn log_parser_skips_unknown_tags() {
        let text = "FOO 1 2 3\nWO 0 0 0 0 1 0 0 0 1 0 0 0 1\n";
        let log = SensorLog::from_text(text).unwrap();
        assert_eq!(log.wo.len(), 1);
    }

    #[test]
    fn log_parser_reports_line_numbers() {
        let text = "WO 0 0 0 0 1 0 0 0 1 0 0 0 1\nWO 1 bad 0 0 1 0 0 0 1 0 0 0 1\n";
        match SensorLog::from_text(text).unwrap_err() {
            PipelineError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let mut log = straight_log(1.0);
        log.gps.reverse();
        let err = run_online(&log, None, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::UnsortedStream { stream: "GPS", .. }
        ));
    }

    #[test]
    fn graph_dump_round_trips_bit_exactly() {
        let log = straight_log(5.0);
        let result = run_batch(&log, Some(&flat_dem()), &PipelineConfig::default(), None).unwrap();
        let text = graph_to_text(&result.graph);
        let back = graph_from_text(&text).unwrap();
        assert_eq!(back.len(), result.graph.len());
        assert_eq!(back.factors().len(), result.graph.factors().len());
        for (a, b) in result.graph.nodes().iter().zip(back.nodes()) {
            assert_eq!(a.stamp.to_bits(), b.stamp.to_bits());
            let (va, vb) = (a.state.to_vector(), b.state.to_vector());
            for k in 0..6 {
                assert_eq!(va[k].to_bits(), vb[k].to_bits());
            }
        }
        for (a, b) in result.graph.factors().iter().zip(back.factors()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.node_i, b.node_i);
            assert_eq!(a.node_j, b.node_j);
            for k in 0..6 {
                assert_eq!(a.z[k].to_bits(), b.z[k].to_bits());
            }
            for k in 0..36 {
                assert_eq!(a.info.as_slice()[k].to_bits(), b.info.as_slice()[k].to_bits());
            }
        }
    }

    #[test]
    fn vo_disagreement_downweights_factor() {
        let log = straight_log(2.0);
        let mut broken = log.clone();
        // Corrupt the visual deltas so the planar discrepancy exceeds the
        // failure threshold over every interval.
        for r in &mut broken.vo {
            if r.stamp > 0.0 {
                r.delta[0] = 0.5;
            }
        }
        let cfg = PipelineConfig::default();
        let good = run_batch(&log, None, &cfg, None).unwrap();
        let bad = run_batch(&broken, None, &cfg, None).unwrap();
        let vo_info = |g: &PoseGraph| {
            g.factors()
                .iter()
                .find(|f| f.kind == FactorKind::Vo && f.node_i == 1)
                .map(|f| f.info[(0, 0)])
                .unwrap()
        };
        let ratio = vo_info(&good.graph) / vo_info(&bad.graph);
        assert_relative_eq!(ratio, 100.0, epsilon = 1e-6);
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        use std::f64::consts::PI;
        assert_relative_eq!(wrap_angle_pi(1.5 * PI), -0.5 * PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle_pi(-1.5 * PI), 0.5 * PI, epsilon = 1e-12);
        assert_eq!(wrap_angle_pi(-PI), PI);
        assert_eq!(wrap_angle_pi(PI), PI);
    }
}
