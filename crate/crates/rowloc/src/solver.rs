//! Sparse nonlinear least squares over the pose graph.
//!
//! Levenberg-Marquardt with Marquardt (diagonal) damping, manifold state
//! updates and support for frozen nodes. Jacobians are central finite
//! differences on the local increment by default, with analytic blocks
//! for the linear factor kinds (GPS, MRF, DEM, IMU).
//!
//! Unconstrained coordinates (zero Hessian diagonal, e.g. roll under a
//! GPS-plus-wheel-odometry cue set) are excluded from the damped solve
//! and keep their current values. Systems below 60 variables solve
//! densely; larger ones use a reverse Cuthill-McKee ordering with a
//! skyline Cholesky factorization.

use crate::factors::{self, Factor, FactorKind};
use crate::geometry::{Pose6D, Transform};
use crate::graph::PoseGraph;
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;
use thiserror::Error;

/// Variables too weakly constrained relative to the strongest diagonal
/// entry are excluded from the solve.
const DIAG_EXCLUDE_REL: f64 = 1e-12;
/// Damping level above which a still-singular system is an error.
const LAMBDA_MAX: f64 = 1e8;
/// Variable count below which the dense solver is used.
const DENSE_LIMIT: usize = 60;

/// Errors from optimization.
#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("damped normal equations singular at lambda {0:.3e}")]
    LinearSolveFailure(f64),
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step's chi-square decrease falls below this
    /// fraction of the current chi-square.
    pub chi2_rel_tol: f64,
    /// Stop when the step norm falls below this.
    pub step_tol: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    /// Central-difference step for numeric Jacobians.
    pub jacobian_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            chi2_rel_tol: 1e-6,
            step_tol: 1e-8,
            lm_lambda_init: 1e-4,
            lm_lambda_factor: 10.0,
            jacobian_eps: 1e-6,
        }
    }
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub converged: bool,
    pub wall_time: f64,
    /// Chi-square after each accepted step, starting with the initial value.
    pub chi2_trace: Vec<f64>,
}

/// Jacobian blocks of a factor's residual with respect to the local
/// increments of its nodes.
pub type JacobianBlocks = (Matrix6<f64>, Option<Matrix6<f64>>);

/// Central-difference Jacobian blocks, step `eps` per local coordinate.
pub fn numeric_jacobian(
    f: &Factor,
    x_i: &Pose6D,
    x_j: Option<&Pose6D>,
    eps: f64,
) -> JacobianBlocks {
    let diff_wrt = |perturb_i: bool| {
        let mut block = Matrix6::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = eps;
            let eval = |d: &Vector6<f64>| {
                let (pi, pj);
                if perturb_i {
                    pi = x_i.boxplus(d);
                    pj = x_j.copied();
                } else {
                    pi = *x_i;
                    pj = Some(x_j.unwrap().boxplus(d));
                }
                let ti = pi.to_transform();
                let tj = pj.map(|p| p.to_transform());
                factors::error(f, &ti, tj.as_ref()).expect("factor evaluable")
            };
            let plus = eval(&d);
            let minus = eval(&(-d));
            block.set_column(k, &((plus - minus) / (2.0 * eps)));
        }
        block
    };
    let j_i = diff_wrt(true);
    let j_j = x_j.filter(|_| f.kind.is_binary()).map(|_| diff_wrt(false));
    (j_i, j_j)
}

/// Jacobian blocks, using closed forms for the linear kinds and central
/// differences for the rest.
pub fn factor_jacobian(
    f: &Factor,
    x_i: &Pose6D,
    x_j: Option<&Pose6D>,
    eps: f64,
) -> JacobianBlocks {
    match f.kind {
        FactorKind::Gps => {
            let mut j = Matrix6::zeros();
            j[(0, 0)] = -1.0;
            j[(1, 1)] = -1.0;
            j[(2, 2)] = -1.0;
            (j, None)
        }
        FactorKind::Dem => {
            let mut j = Matrix6::zeros();
            j[(2, 2)] = -1.0;
            (j, None)
        }
        FactorKind::Mrf => {
            let mut j_i = Matrix6::zeros();
            j_i[(2, 2)] = -1.0;
            let mut j_j = Matrix6::zeros();
            j_j[(2, 2)] = 1.0;
            (j_i, Some(j_j))
        }
        _ => numeric_jacobian(f, x_i, x_j, eps),
    }
}

/// The assembled normal equations `H delta = -b` in block form.
#[derive(Debug, Clone)]
pub struct Linearized {
    /// Active node ids, ascending; block `k` belongs to `order[k]`.
    pub order: Vec<usize>,
    /// Upper-triangle 6x6 blocks keyed by `(block row, block col)`.
    pub h: BTreeMap<(usize, usize), Matrix6<f64>>,
    pub b: DVector<f64>,
}

impl Linearized {
    /// Expands the block-sparse Hessian to a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = 6 * self.order.len();
        let mut m = DMatrix::zeros(n, n);
        for (&(br, bc), block) in &self.h {
            for r in 0..6 {
                for c in 0..6 {
                    m[(6 * br + r, 6 * bc + c)] = block[(r, c)];
                    m[(6 * bc + c, 6 * br + r)] = block[(r, c)];
                }
            }
        }
        m
    }
}

/// Builds `H = sum J' Omega J` and `b = sum J' Omega e` over all factors
/// touching at least one active node. Frozen or inactive nodes keep their
/// states and contribute residuals only.
pub fn linearize(g: &PoseGraph, active: &BTreeSet<usize>, eps: f64) -> Linearized {
    let order: Vec<usize> = active.iter().copied().collect();
    let slot: BTreeMap<usize, usize> =
        order.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut h: BTreeMap<(usize, usize), Matrix6<f64>> = BTreeMap::new();
    let mut b = DVector::zeros(6 * order.len());

    let transforms: Vec<Transform> = g.nodes().iter().map(|n| n.state.to_transform()).collect();
    for f in g.factors() {
        let slot_i = slot.get(&f.node_i).copied();
        let slot_j = f.node_j.and_then(|j| slot.get(&j).copied());
        if slot_i.is_none() && slot_j.is_none() {
            continue;
        }
        let x_i = g.state(f.node_i);
        let x_j = f.node_j.map(|j| g.state(j));
        let e = factors::error(
            f,
            &transforms[f.node_i],
            f.node_j.map(|j| &transforms[j]),
        )
        .expect("factor validated at insertion");
        let (j_i, j_j) = factor_jacobian(f, x_i, x_j, eps);

        let mut contributions: Vec<(usize, Matrix6<f64>)> = Vec::with_capacity(2);
        if let Some(s) = slot_i {
            contributions.push((s, j_i));
        }
        if let (Some(s), Some(jb)) = (slot_j, j_j) {
            contributions.push((s, jb));
        }
        for &(s, ref jac) in &contributions {
            let jt_omega = jac.transpose() * f.info;
            let grad = jt_omega * e;
            for r in 0..6 {
                b[6 * s + r] += grad[r];
            }
            *h.entry((s, s)).or_insert_with(Matrix6::zeros) += jt_omega * jac;
        }
        if contributions.len() == 2 {
            let (si, ji) = (contributions[0].0, &contributions[0].1);
            let (sj, jj) = (contributions[1].0, &contributions[1].1);
            let cross = ji.transpose() * f.info * jj;
            if si <= sj {
                *h.entry((si, sj)).or_insert_with(Matrix6::zeros) += cross;
            } else {
                *h.entry((sj, si)).or_insert_with(Matrix6::zeros) += cross.transpose();
            }
        }
    }
    Linearized { order, h, b }
}

/// Skyline (profile) storage of a symmetric matrix: each row holds the
/// contiguous range from its first structurally nonzero column to the
/// diagonal.
struct Skyline {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Skyline {
    fn new(first: Vec<usize>) -> Self {
        let rows = first
            .iter()
            .enumerate()
            .map(|(r, &f)| vec![0.0; r - f + 1])
            .collect();
        Self { first, rows }
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(c >= self.first[r] && c <= r);
        self.rows[r][c - self.first[r]] += v;
    }

    fn scale_diag(&mut self, factor: f64) {
        for (r, row) in self.rows.iter_mut().enumerate() {
            let last = r - self.first[r];
            row[last] *= factor;
        }
    }

    /// In-place Cholesky; fails on a non-positive pivot.
    fn factorize(&mut self) -> bool {
        let n = self.rows.len();
        for r in 0..n {
            let fr = self.first[r];
            for c in fr..r {
                let fc = self.first[c];
                let start = fr.max(fc);
                let mut sum = self.rows[r][c - fr];
                for k in start..c {
                    sum -= self.rows[r][k - fr] * self.rows[c][k - fc];
                }
                self.rows[r][c - fr] = sum / self.rows[c][c - fc];
            }
            let mut d = self.rows[r][r - fr];
            for k in fr..r {
                let l = self.rows[r][k - fr];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            self.rows[r][r - fr] = d.sqrt();
        }
        true
    }

    /// Solves `L L' x = rhs` after `factorize`.
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.rows.len();
        let mut y = rhs.clone();
        for r in 0..n {
            let fr = self.first[r];
            let mut sum = y[r];
            for k in fr..r {
                sum -= self.rows[r][k - fr] * y[k];
            }
            y[r] = sum / self.rows[r][r - fr];
        }
        for r in (0..n).rev() {
            let fr = self.first[r];
            y[r] /= self.rows[r][r - fr];
            let xr = y[r];
            for k in fr..r {
                y[k] -= self.rows[r][k - fr] * xr;
            }
        }
        y
    }
}

/// Reverse Cuthill-McKee ordering of the block adjacency.
fn rcm_order(n_blocks: usize, h: &BTreeMap<(usize, usize), Matrix6<f64>>) -> Vec<usize> {
    let mut adj = vec![BTreeSet::new(); n_blocks];
    for &(r, c) in h.keys() {
        if r != c {
            adj[r].insert(c);
            adj[c].insert(r);
        }
    }
    let degree = |k: usize| adj[k].len();
    let mut visited = vec![false; n_blocks];
    let mut order = Vec::with_capacity(n_blocks);
    while order.len() < n_blocks {
        let start = (0..n_blocks)
            .filter(|&k| !visited[k])
            .min_by_key(|&k| degree(k))
            .unwrap();
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(k) = queue.pop_front() {
            order.push(k);
            let mut next: Vec<usize> =
                adj[k].iter().copied().filter(|&m| !visited[m]).collect();
            next.sort_by_key(|&m| degree(m));
            for m in next {
                visited[m] = true;
                queue.push_back(m);
            }
        }
    }
    order.reverse();
    order
}

/// Solves `(H + lambda diag(H)) delta = -b`, skipping unconstrained
/// coordinates. `None` means the damped system was numerically singular.
fn solve_damped(lin: &Linearized, lambda: f64) -> Option<DVector<f64>> {
    let n_blocks = lin.order.len();
    let n = 6 * n_blocks;
    let mut diag = DVector::zeros(n);
    for (&(r, c), block) in &lin.h {
        if r == c {
            for k in 0..6 {
                diag[6 * r + k] = block[(k, k)];
            }
        }
    }
    let max_diag = diag.amax();
    if max_diag <= 0.0 {
        return Some(DVector::zeros(n));
    }
    let included: Vec<usize> = (0..n)
        .filter(|&k| diag[k] > DIAG_EXCLUDE_REL * max_diag)
        .collect();
    let red_of: BTreeMap<usize, usize> =
        included.iter().enumerate().map(|(r, &k)| (k, r)).collect();
    let m = included.len();
    if m == 0 {
        return Some(DVector::zeros(n));
    }

    let mut rhs = DVector::zeros(m);
    for (r, &k) in included.iter().enumerate() {
        rhs[r] = -lin.b[k];
    }

    let reduced = if m < DENSE_LIMIT {
        let mut hm = DMatrix::zeros(m, m);
        for (&(br, bc), block) in &lin.h {
            for r in 0..6 {
                for c in 0..6 {
                    let (gr, gc) = (6 * br + r, 6 * bc + c);
                    if let (Some(&rr), Some(&rc)) = (red_of.get(&gr), red_of.get(&gc)) {
                        hm[(rr, rc)] = block[(r, c)];
                        hm[(rc, rr)] = block[(r, c)];
                    }
                }
            }
        }
        for k in 0..m {
            hm[(k, k)] *= 1.0 + lambda;
        }
        let chol = nalgebra::Cholesky::new(hm)?;
        chol.solve(&rhs)
    } else {
        // Permute blocks by RCM, then scalar indices within the profile.
        let perm = rcm_order(n_blocks, &lin.h);
        let mut scalar_perm = Vec::with_capacity(m);
        for &p in &perm {
            for k in 0..6 {
                if let Some(&r) = red_of.get(&(6 * p + k)) {
                    scalar_perm.push(r);
                }
            }
        }
        let mut pos_of = vec![0usize; m];
        for (pos, &r) in scalar_perm.iter().enumerate() {
            pos_of[r] = pos;
        }
        let mut block_pos = vec![0usize; n_blocks];
        for (pos, &p) in perm.iter().enumerate() {
            block_pos[p] = pos;
        }

        // Profile per permuted row from the block adjacency.
        let mut first = (0..m).collect::<Vec<usize>>();
        let mut touch = |br: usize, bc: usize| {
            for r in 0..6 {
                let Some(&rr) = red_of.get(&(6 * br + r)) else { continue };
                let pr = pos_of[rr];
                for c in 0..6 {
                    let Some(&rc) = red_of.get(&(6 * bc + c)) else { continue };
                    let pc = pos_of[rc];
                    let (lo, hi) = (pr.min(pc), pr.max(pc));
                    if lo < first[hi] {
                        first[hi] = lo;
                    }
                }
            }
        };
        for &(br, bc) in lin.h.keys() {
            touch(br, bc);
        }
        // A profile must be monotone enough for the factorization loop:
        // row r may reference any earlier row's entries back to first[r].
        let mut sky = Skyline::new(first);
        for (&(br, bc), block) in &lin.h {
            for r in 0..6 {
                let Some(&rr) = red_of.get(&(6 * br + r)) else { continue };
                for c in 0..6 {
                    let Some(&rc) = red_of.get(&(6 * bc + c)) else { continue };
                    if br == bc && c < r {
                        continue;
                    }
                    let (pr, pc) = (pos_of[rr], pos_of[rc]);
                    if pr == pc {
                        sky.add(pr, pc, block[(r, c)]);
                    } else {
                        sky.add(pr.max(pc), pr.min(pc), block[(r, c)]);
                    }
                }
            }
        }
        sky.scale_diag(1.0 + lambda);
        if !sky.factorize() {
            return None;
        }
        let mut prhs = DVector::zeros(m);
        for (pos, &r) in scalar_perm.iter().enumerate() {
            prhs[pos] = rhs[r];
        }
        let px = sky.solve(&prhs);
        let mut x = DVector::zeros(m);
        for (pos, &r) in scalar_perm.iter().enumerate() {
            x[r] = px[pos];
        }
        x
    };

    let mut delta = DVector::zeros(n);
    for (r, &k) in included.iter().enumerate() {
        delta[k] = reduced[r];
    }
    Some(delta)
}

/// Chi-square over the factors touching any node in `touched`.
fn cost_over(g: &PoseGraph, factor_ids: &[usize]) -> f64 {
    let transforms: Vec<Transform> = g.nodes().iter().map(|n| n.state.to_transform()).collect();
    factor_ids
        .iter()
        .map(|&fi| {
            let f = &g.factors()[fi];
            let e = factors::error(
                f,
                &transforms[f.node_i],
                f.node_j.map(|j| &transforms[j]),
            )
            .expect("factor validated at insertion");
            (e.transpose() * f.info * e)[(0, 0)]
        })
        .sum()
}

/// Optimizes the active nodes by Levenberg-Marquardt.
///
/// Nodes below the graph's frozen watermark are removed from the active
/// set; the reported chi-square covers the factors touching at least one
/// remaining active node.
pub fn lm_optimize(
    g: &mut PoseGraph,
    active: &BTreeSet<usize>,
    cfg: &SolverConfig,
) -> Result<SolveReport, SolverError> {
    let start = Instant::now();
    let active: BTreeSet<usize> = active
        .iter()
        .copied()
        .filter(|&id| id >= g.frozen_below() && id < g.len())
        .collect();
    let touched: Vec<usize> = g
        .factors()
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            active.contains(&f.node_i) || f.node_j.is_some_and(|j| active.contains(&j))
        })
        .map(|(k, _)| k)
        .collect();

    let mut chi2 = cost_over(g, &touched);
    let mut trace = vec![chi2];
    let report = |iterations, converged, final_chi2, trace: Vec<f64>, start: Instant| SolveReport {
        iterations,
        initial_chi2: trace[0],
        final_chi2,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        chi2_trace: trace,
    };
    if active.is_empty() || touched.is_empty() {
        return Ok(report(0, true, chi2, trace, start));
    }

    let mut lambda = cfg.lm_lambda_init;
    let mut lin = linearize(g, &active, cfg.jacobian_eps);
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iterations {
        iterations += 1;
        loop {
            match solve_damped(&lin, lambda) {
                Some(delta) => {
                    if delta.norm() < cfg.step_tol {
                        converged = true;
                        break 'outer;
                    }
                    let saved: Vec<(usize, Pose6D)> =
                        lin.order.iter().map(|&id| (id, *g.state(id))).collect();
                    for (k, &id) in lin.order.iter().enumerate() {
                        let d = Vector6::from_fn(|i, _| delta[6 * k + i]);
                        let next = g.state(id).boxplus(&d);
                        g.set_state(id, next);
                    }
                    let new_chi2 = cost_over(g, &touched);
                    if new_chi2 <= chi2 {
                        let rel = (chi2 - new_chi2) / new_chi2.max(f64::MIN_POSITIVE);
                        chi2 = new_chi2;
                        trace.push(chi2);
                        lambda = (lambda / cfg.lm_lambda_factor).max(1e-12);
                        lin = linearize(g, &active, cfg.jacobian_eps);
                        if rel < cfg.chi2_rel_tol {
                            converged = true;
                            break 'outer;
                        }
                        break;
                    }
                    for (id, state) in saved {
                        g.set_state(id, state);
                    }
                    lambda *= cfg.lm_lambda_factor;
                    if lambda > LAMBDA_MAX {
                        break 'outer;
                    }
                }
                None => {
                    lambda *= cfg.lm_lambda_factor;
                    if lambda > LAMBDA_MAX {
                        return Err(SolverError::LinearSolveFailure(lambda));
                    }
                }
            }
        }
    }

    Ok(report(iterations, converged, chi2, trace, start))
}
