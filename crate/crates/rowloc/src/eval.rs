//! Error statistics against ground truth and the ablation table driver.
//!
//! Estimates and truth live in the same field frame anchored at the first
//! node, so errors are raw coordinate differences; no trajectory alignment
//! is performed, which would mask absolute position bias.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::dem::DemGrid;
use crate::factors::FactorKind;
use crate::geometry::{rot_exp, rot_from_rpy, rot_log, rpy_from_rot, Pose6D};
use crate::pipeline::{run_batch, run_online, PipelineConfig, PipelineError, SensorLog};
use crate::sim::TruthSample;

/// A stamped pose list in the field frame.
pub type Trajectory = Vec<(f64, Pose6D)>;

/// Failure modes of statistics computation.
#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    /// No estimate stamp falls inside the truth span.
    #[error("estimate and truth do not overlap in time")]
    EmptyOverlap,
}

/// Position error statistics of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    /// Root mean square of the 3D error norms, metres.
    pub rmse: f64,
    /// Largest 3D error norm, metres.
    pub max_abs: f64,
    /// Mean 3D error norm, metres.
    pub mean_abs: f64,
    /// Mean absolute error along x, metres.
    pub err_x: f64,
    /// Mean absolute error along y, metres.
    pub err_y: f64,
    /// Mean absolute error along z, metres.
    pub err_z: f64,
    /// Samples compared.
    pub n: usize,
}

/// Strips truth samples down to a stamped pose list.
pub fn to_trajectory(truth: &[TruthSample]) -> Trajectory {
    truth.iter().map(|s| (s.stamp, s.pose)).collect()
}

/// Truth position linearly interpolated at `stamp`, `None` outside the
/// span. The truth is sampled densely enough that linear interpolation is
/// exact to well below sensor noise.
fn truth_position_at(truth: &[(f64, Pose6D)], stamp: f64) -> Option<Vector3<f64>> {
    if truth.is_empty() || stamp < truth[0].0 || stamp > truth[truth.len() - 1].0 {
        return None;
    }
    let hi = truth.partition_point(|&(s, _)| s < stamp);
    if hi < truth.len() && truth[hi].0 == stamp {
        return Some(truth[hi].1.t);
    }
    let lo = hi - 1;
    let span = truth[hi].0 - truth[lo].0;
    let alpha = if span > 0.0 {
        (stamp - truth[lo].0) / span
    } else {
        0.0
    };
    Some(truth[lo].1.t + alpha * (truth[hi].1.t - truth[lo].1.t))
}

/// Position error statistics of `estimate` against `truth`. Truth is
/// interpolated at each estimate stamp; estimate samples outside the truth
/// span are skipped.
pub fn compute_stats(
    estimate: &[(f64, Pose6D)],
    truth: &[(f64, Pose6D)],
) -> Result<RunStats, EvalError> {
    let mut sum_sq = 0.0;
    let mut sum_norm = 0.0;
    let mut max_abs = 0.0f64;
    let mut sum_axis = Vector3::zeros();
    let mut n = 0usize;
    for &(stamp, pose) in estimate {
        let Some(truth_pos) = truth_position_at(truth, stamp) else {
            continue;
        };
        let e = pose.t - truth_pos;
        let norm = e.norm();
        sum_sq += norm * norm;
        sum_norm += norm;
        max_abs = max_abs.max(norm);
        sum_axis += e.abs();
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyOverlap);
    }
    let inv = 1.0 / n as f64;
    Ok(RunStats {
        rmse: (sum_sq * inv).sqrt(),
        max_abs,
        mean_abs: sum_norm * inv,
        err_x: sum_axis.x * inv,
        err_y: sum_axis.y * inv,
        err_z: sum_axis.z * inv,
        n,
    })
}

/// One ablation result: which cues ran, in which mode, and how it scored.
#[derive(Debug, Clone)]
pub struct AblationRow {
    /// Cue mask label, kinds joined by `+`.
    pub cues: String,
    /// `"online"` or `"batch"`.
    pub mode: &'static str,
    /// Error statistics of the run.
    pub stats: RunStats,
}

/// Canonical label for a cue mask.
pub fn cue_label(cues: &BTreeSet<FactorKind>) -> String {
    let names: Vec<&str> = FactorKind::all()
        .iter()
        .filter(|k| cues.contains(k))
        .map(|k| k.name())
        .collect();
    names.join("+")
}

/// Parses a cue mask like `GPS+WO+MRF`. `ALL` selects every cue.
pub fn parse_cues(text: &str) -> Result<BTreeSet<FactorKind>, String> {
    if text.trim() == "ALL" {
        return Ok(FactorKind::all().iter().copied().collect());
    }
    let mut out = BTreeSet::new();
    for part in text.split('+') {
        let name = part.trim();
        let kind = FactorKind::from_name(name)
            .ok_or_else(|| format!("unknown cue {name:?} in mask {text:?}"))?;
        out.insert(kind);
    }
    if out.is_empty() {
        return Err(format!("empty cue mask {text:?}"));
    }
    Ok(out)
}

/// Runs one batch (and optionally one online) estimate per cue mask and
/// scores each against the truth. With `online` set, the batch pass is
/// seeded from the online states, mirroring how the full system refines a
/// live run. Row order follows the mask list, online before batch.
pub fn ablation_table(
    log: &SensorLog,
    dem: Option<&DemGrid>,
    truth: &[(f64, Pose6D)],
    masks: &[BTreeSet<FactorKind>],
    cfg: &PipelineConfig,
    online: bool,
) -> Result<Vec<AblationRow>, AblationError> {
    let mut rows = Vec::new();
    for mask in masks {
        let mut run_cfg = cfg.clone();
        run_cfg.cues = mask.clone();
        let label = cue_label(mask);
        let mut seed: Option<Vec<Pose6D>> = None;
        if online {
            let result = run_online(log, dem, &run_cfg)?;
            rows.push(AblationRow {
                cues: label.clone(),
                mode: "online",
                stats: compute_stats(&result.trajectory(), truth)?,
            });
            seed = Some(result.graph.nodes().iter().map(|n| n.state).collect());
        }
        let result = run_batch(log, dem, &run_cfg, seed.as_deref())?;
        rows.push(AblationRow {
            cues: label,
            mode: "batch",
            stats: compute_stats(&result.trajectory(), truth)?,
        });
    }
    Ok(rows)
}

/// Failure modes of the ablation driver.
#[derive(Debug, Error)]
pub enum AblationError {
    /// A pipeline run failed.
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    /// Scoring failed.
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Serializes ablation rows as CSV.
pub fn stats_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("cues,mode,err_x,err_y,err_z,mean,max,rmse,n\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.cues,
            r.mode,
            r.stats.err_x,
            r.stats.err_y,
            r.stats.err_z,
            r.stats.mean_abs,
            r.stats.max_abs,
            r.stats.rmse,
            r.stats.n
        )
        .unwrap();
    }
    out
}

/// Serializes an estimated trajectory: one `EST <stamp> <x> <y> <z>
/// <roll> <pitch> <yaw>` line per pose.
pub fn estimate_to_text(trajectory: &[(f64, Pose6D)]) -> String {
    let mut out = String::new();
    for (stamp, pose) in trajectory {
        let (roll, pitch, yaw) = rpy_from_rot(&rot_exp(&pose.r));
        writeln!(
            out,
            "EST {} {} {} {} {} {} {}",
            stamp, pose.t.x, pose.t.y, pose.t.z, roll, pitch, yaw
        )
        .unwrap();
    }
    out
}

/// Parses the format written by [`estimate_to_text`].
pub fn estimate_from_text(text: &str) -> Result<Trajectory, PipelineError> {
    let mut out = Trajectory::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_ascii_whitespace().collect();
        if fields.len() != 8 || fields[0] != "EST" {
            return Err(PipelineError::Parse {
                line,
                message: "expected EST line with 7 fields".to_string(),
            });
        }
        let mut v = [0.0f64; 7];
        for (slot, field) in v.iter_mut().zip(&fields[1..8]) {
            *slot = field.parse().map_err(|_| PipelineError::Parse {
                line,
                message: format!("bad float {field:?}"),
            })?;
        }
        let rot = rot_from_rpy(v[4], v[5], v[6]);
        out.push((
            v[0],
            Pose6D::new(Vector3::new(v[1], v[2], v[3]), rot_log(&rot)),
        ));
    }
    Ok(out)
}

/// Writes an estimated trajectory to a file.
pub fn write_estimate(trajectory: &[(f64, Pose6D)], path: &Path) -> Result<(), PipelineError> {
    std::fs::write(path, estimate_to_text(trajectory))?;
    Ok(())
}

/// Reads an estimated trajectory from a file.
pub fn read_estimate(path: &Path) -> Result<Trajectory, PipelineError> {
    estimate_from_text(&std::fs::read_to_string(path)?)
}
