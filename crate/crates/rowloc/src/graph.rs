//! The pose graph: nodes with stamped states, factor storage, smoothness
//! adjacency queries and total-cost evaluation.
//!
//! Nodes are appended in time order and identified by their index. The
//! `frozen_below` watermark marks nodes the solver must keep fixed; their
//! factors still contribute residuals. Smoothness (MRF) adjacency links
//! each node to its temporal neighbors and to the spatially closest node
//! in each adjacent crop row.

use crate::factors::{self, Factor, FactorKind};
use crate::geometry::{Pose6D, Transform};
use std::collections::BTreeSet;
use thiserror::Error;

/// Errors from graph mutation.
#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("stamp {stamp} not after last stamp {last}")]
    NonMonotoneStamp { stamp: f64, last: f64 },
    #[error("factor references unknown node {0}")]
    UnknownNode(usize),
    #[error("binary factor missing its second node")]
    MissingSecondNode,
    #[error("unary factor carries a second node")]
    UnexpectedSecondNode,
}

/// One robot pose at a discrete point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub stamp: f64,
    pub state: Pose6D,
    /// Crop-row index when known; drives cross-row adjacency.
    pub row_hint: Option<i64>,
}

/// The full pose graph.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    factors: Vec<Factor>,
    frozen_below: usize,
    /// Cross-row search radius when row hints are absent.
    pub r_mrf: f64,
    mrf_pairs: BTreeSet<(usize, usize)>,
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self::new(2.0 * 1.5)
    }
}

impl PoseGraph {
    /// Creates an empty graph with the given hint-less cross-row radius.
    pub fn new(r_mrf: f64) -> Self {
        Self {
            nodes: Vec::new(),
            factors: Vec::new(),
            frozen_below: 0,
            r_mrf,
            mrf_pairs: BTreeSet::new(),
        }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn state(&self, id: usize) -> &Pose6D {
        &self.nodes[id].state
    }

    pub fn set_state(&mut self, id: usize, state: Pose6D) {
        self.nodes[id].state = state;
    }

    /// Nodes with id below the watermark stay fixed during optimization.
    pub fn frozen_below(&self) -> usize {
        self.frozen_below
    }

    pub fn freeze_below(&mut self, id: usize) {
        assert!(id <= self.nodes.len(), "watermark {id} beyond graph");
        self.frozen_below = id;
    }

    /// Appends a node; stamps must strictly increase.
    pub fn add_node(
        &mut self,
        stamp: f64,
        state: Pose6D,
        row_hint: Option<i64>,
    ) -> Result<usize, GraphError> {
        if let Some(last) = self.nodes.last() {
            if stamp <= last.stamp {
                return Err(GraphError::NonMonotoneStamp {
                    stamp,
                    last: last.stamp,
                });
            }
        }
        let id = self.nodes.len();
        self.nodes.push(GraphNode {
            id,
            stamp,
            state,
            row_hint,
        });
        Ok(id)
    }

    /// Inserts a factor after validating its node references. Smoothness
    /// factors are deduplicated by unordered node pair; a duplicate is
    /// silently skipped.
    pub fn add_factor(&mut self, f: Factor) -> Result<(), GraphError> {
        if f.node_i >= self.nodes.len() {
            return Err(GraphError::UnknownNode(f.node_i));
        }
        match (f.kind.is_binary(), f.node_j) {
            (true, None) => return Err(GraphError::MissingSecondNode),
            (false, Some(_)) => return Err(GraphError::UnexpectedSecondNode),
            (true, Some(j)) if j >= self.nodes.len() => {
                return Err(GraphError::UnknownNode(j));
            }
            _ => {}
        }
        if f.kind == FactorKind::Mrf {
            let j = f.node_j.unwrap();
            let pair = (f.node_i.min(j), f.node_i.max(j));
            if !self.mrf_pairs.insert(pair) {
                return Ok(());
            }
        }
        self.factors.push(f);
        Ok(())
    }

    /// True when a smoothness factor already links the pair.
    pub fn mrf_edge_exists(&self, i: usize, j: usize) -> bool {
        self.mrf_pairs.contains(&(i.min(j), i.max(j)))
    }

    /// Nodes linked to `i` by stored smoothness factors.
    pub fn mrf_partners(&self, i: usize) -> Vec<usize> {
        self.mrf_pairs
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Smoothness adjacency of node `i`: temporal neighbors plus the
    /// planar-closest node in each adjacent row (at most one per side).
    /// Without a row hint, falls back to a radius search over nodes more
    /// than 5 ids away.
    pub fn mrf_neighbors(&self, i: usize) -> Vec<usize> {
        let node = &self.nodes[i];
        let mut out = BTreeSet::new();
        if i > 0 {
            out.insert(i - 1);
        }
        if i + 1 < self.nodes.len() {
            out.insert(i + 1);
        }
        let planar = |m: &GraphNode| {
            (m.state.t.x - node.state.t.x).hypot(m.state.t.y - node.state.t.y)
        };
        match node.row_hint {
            Some(h) => {
                for adj in [h - 1, h + 1] {
                    let best = self
                        .nodes
                        .iter()
                        .filter(|m| m.row_hint == Some(adj))
                        .min_by(|a, b| planar(a).total_cmp(&planar(b)));
                    if let Some(m) = best {
                        out.insert(m.id);
                    }
                }
            }
            None => {
                let mut best_lo: Option<(f64, usize)> = None;
                let mut best_hi: Option<(f64, usize)> = None;
                for m in &self.nodes {
                    if m.id + 5 >= i && m.id <= i + 5 {
                        continue;
                    }
                    let d = planar(m);
                    if d > self.r_mrf {
                        continue;
                    }
                    let slot = if m.id < i { &mut best_lo } else { &mut best_hi };
                    if slot.map_or(true, |(bd, _)| d < bd) {
                        *slot = Some((d, m.id));
                    }
                }
                for found in [best_lo, best_hi].into_iter().flatten() {
                    out.insert(found.1);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Total cost `sum over factors of e' * Omega * e`.
    pub fn total_cost(&self) -> f64 {
        let transforms: Vec<Transform> =
            self.nodes.iter().map(|n| n.state.to_transform()).collect();
        self.factors
            .iter()
            .map(|f| {
                let x_j = f.node_j.map(|j| &transforms[j]);
                let e = factors::error(f, &transforms[f.node_i], x_j)
                    .expect("factor validated at insertion");
                (e.transpose() * f.info * e)[(0, 0)]
            })
            .sum()
    }
}
