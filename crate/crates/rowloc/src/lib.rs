//! Multi-cue pose-graph localization for ground robots in row-crop fields.
//!
//! The crate fuses wheel odometry, visual odometry, LiDAR odometry, GPS,
//! IMU attitude, a kinematic motion model, elevation-map lookups and a
//! terrain-smoothness prior into a single pose graph over SE(3) states.
//! Nodes are triggered by traveled distance, optimized either over a
//! sliding window as measurements arrive or in one global batch pass.
//!
//! Module layout:
//! - [`geometry`]: SE(3) transforms, minimal 6-vector pose parameterization.
//! - [`dem`]: regular-grid digital elevation model with bilinear queries.
//! - [`factors`]: measurement factors, predictions, errors and weights.
//! - [`graph`]: pose-graph container and neighborhood queries.
//! - [`solver`]: Levenberg-Marquardt optimization over node states.
//! - [`pipeline`]: sensor log ingestion, node triggering, online/batch runs.
//! - [`sim`]: field/trajectory/sensor simulator for reproducible datasets.
//! - [`eval`]: trajectory error statistics and cue ablation tables.

pub mod dem;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod sim;
pub mod solver;
