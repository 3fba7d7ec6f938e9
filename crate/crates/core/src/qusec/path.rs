//! Shortest-path-first relay path computation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ids::{KmsId, LinkId, NodeId};
use crate::topology::{Link, Topology, WeightPolicy};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("no path from {0} to {1}")]
    NoPath(NodeId, NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("source and destination are the same node {0}")]
    SameNode(NodeId),
}

/// A computed relay path, at node and KMS granularity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayPath {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
    /// For every traversed link `(u, v)`: the KMS of `u` then the KMS of `v`.
    pub kms: Vec<KmsId>,
    pub cost: f64,
}

const REL_EPS: f64 = 1e-9;

/// Costs within a relative tolerance count as equal, so float summation
/// order never decides between two equally good paths.
pub(crate) fn cost_cmp(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= REL_EPS * a.abs().max(b.abs()) {
        Ordering::Equal
    } else {
        a.partial_cmp(&b).expect("finite costs")
    }
}

#[derive(Debug, Clone)]
struct Label {
    cost: f64,
    nodes: Vec<NodeId>,
    links: Vec<LinkId>,
}

impl Label {
    /// Lower cost first; ties broken by node sequence, then link sequence.
    fn better_than(&self, other: &Label) -> bool {
        cost_cmp(self.cost, other.cost)
            .then_with(|| self.nodes.cmp(&other.nodes))
            .then_with(|| self.links.cmp(&other.links))
            == Ordering::Less
    }
}

/// Minimum-weight path from `src` to `dst` under `policy`, expanded to KMSs.
///
/// Among equal-cost paths the one with the lexicographically smallest node
/// sequence wins, so results are deterministic.
pub fn compute_relay_path(
    topology: &Topology,
    src: &NodeId,
    dst: &NodeId,
    policy: WeightPolicy,
) -> Result<RelayPath, PathError> {
    shortest_path_by(topology, src, dst, |l| policy.weight(l))
}

/// Dijkstra over the link graph with an arbitrary positive weight function.
pub fn shortest_path_by(
    topology: &Topology,
    src: &NodeId,
    dst: &NodeId,
    weight: impl Fn(&Link) -> f64,
) -> Result<RelayPath, PathError> {
    for n in [src, dst] {
        if topology.node(n).is_none() {
            return Err(PathError::UnknownNode(n.clone()));
        }
    }
    if src == dst {
        return Err(PathError::SameNode(src.clone()));
    }

    let mut best: BTreeMap<&NodeId, Label> = BTreeMap::new();
    let mut settled: BTreeMap<&NodeId, Label> = BTreeMap::new();
    best.insert(src, Label { cost: 0.0, nodes: vec![src.clone()], links: Vec::new() });

    loop {
        let Some(u) = best
            .iter()
            .reduce(|a, b| if b.1.better_than(a.1) { b } else { a })
            .map(|(u, _)| *u)
        else {
            return Err(PathError::NoPath(src.clone(), dst.clone()));
        };
        let label = best.remove(u).expect("selected from map");
        if u == dst {
            return Ok(expand(label));
        }
        for link in topology.incident_links(u) {
            let v = link.other(u).expect("incident");
            if settled.contains_key(v) {
                continue;
            }
            let w = weight(link);
            debug_assert!(w.is_finite() && w > 0.0, "weights must be positive");
            let mut cand = label.clone();
            cand.cost += w;
            cand.nodes.push(v.clone());
            cand.links.push(link.id.clone());
            if best.get(v).is_none_or(|cur| cand.better_than(cur)) {
                best.insert(v, cand);
            }
        }
        settled.insert(u, label);
    }
}

fn expand(label: Label) -> RelayPath {
    let mut kms = Vec::with_capacity(2 * label.links.len());
    for (pair, link) in label.nodes.windows(2).zip(&label.links) {
        kms.push(KmsId::render(&pair[0], link));
        kms.push(KmsId::render(&pair[1], link));
    }
    RelayPath { nodes: label.nodes, links: label.links, kms, cost: label.cost }
}
