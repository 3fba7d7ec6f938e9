#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::{json, Value};

use qkdnet::harness::{self, RunOptions, RunOutput, Scenario};
use qkdnet::protocol::{Envelope, Message, KEY_MATERIAL_FIELDS};
use qkdnet::topology::Link;
use qkdnet::{load_topology, EntityName, KmsId, LinkId, NodeId, Topology, WeightPolicy};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn scenario_file(name: &str) -> PathBuf {
    scenarios_dir().join(name)
}

pub fn read_topology(name: &str) -> Topology {
    load_topology(&std::fs::read_to_string(scenario_file(name)).unwrap()).unwrap()
}

/// An undirected multigraph on nodes `N1..Nn`.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub n: usize,
    /// `(a, b, key_rate, distance_km)` with 0-based endpoints.
    pub edges: Vec<(usize, usize, f64, f64)>,
}

pub fn node(i: usize) -> NodeId {
    NodeId::new(format!("N{}", i + 1))
}

impl GraphSpec {
    pub fn chain(links: usize) -> Self {
        Self { n: links + 1, edges: (0..links).map(|i| (i, i + 1, 10.0, 10.0)).collect() }
    }

    pub fn to_json(&self, policy: WeightPolicy, apps: &[(&str, usize)], pool: u64) -> Value {
        json!({
            "nodes": (0..self.n).map(|i| json!({"id": node(i).as_str()})).collect::<Vec<_>>(),
            "links": self.edges.iter().enumerate().map(|(k, (a, b, rate, dist))| json!({
                "id": format!("e{k}"),
                "a": node(*a).as_str(),
                "b": node(*b).as_str(),
                "key_rate": rate,
                "distance_km": dist,
                "initial_pool": pool,
            })).collect::<Vec<_>>(),
            "apps": apps.iter().map(|(id, n)| json!({"id": id, "node": node(*n).as_str()})).collect::<Vec<_>>(),
            "weight_policy": policy.as_str(),
        })
    }

    pub fn topology(&self, policy: WeightPolicy, apps: &[(&str, usize)], pool: u64) -> Topology {
        load_topology(&self.to_json(policy, apps, pool).to_string()).unwrap()
    }
}

/// Random connected multigraphs with 2..=max_nodes nodes: a random spanning
/// tree plus a few extra (possibly parallel) edges.
pub fn arb_graph(max_nodes: usize) -> impl Strategy<Value = GraphSpec> {
    let weights = (1u32..=50, 1u32..=100).prop_map(|(r, d)| (r as f64, d as f64));
    (2..=max_nodes)
        .prop_flat_map(move |n| {
            let tree = (1..n).map(|i| (0..i, weights.clone())).collect::<Vec<_>>();
            let extra = proptest::collection::vec((0..n, 0..n, weights.clone()), 0..=n);
            (Just(n), tree, extra)
        })
        .prop_map(|(n, tree, extra)| {
            let mut edges: Vec<_> = tree
                .into_iter()
                .enumerate()
                .map(|(i, (parent, (r, d)))| (parent, i + 1, r, d))
                .collect();
            edges.extend(extra.into_iter().filter(|(a, b, _)| a != b).map(|(a, b, (r, d))| (a, b, r, d)));
            GraphSpec { n, edges }
        })
}

/// Every simple path from `src` to `dst` as `(cost, nodes, links)`.
pub fn all_simple_paths(
    topo: &Topology,
    src: &NodeId,
    dst: &NodeId,
    weight: &dyn Fn(&Link) -> f64,
) -> Vec<(f64, Vec<NodeId>, Vec<LinkId>)> {
    fn walk(
        topo: &Topology,
        dst: &NodeId,
        weight: &dyn Fn(&Link) -> f64,
        nodes: &mut Vec<NodeId>,
        links: &mut Vec<LinkId>,
        cost: f64,
        out: &mut Vec<(f64, Vec<NodeId>, Vec<LinkId>)>,
    ) {
        let here = nodes.last().unwrap().clone();
        if &here == dst {
            out.push((cost, nodes.clone(), links.clone()));
            return;
        }
        for l in topo.links() {
            let Some(next) = l.other(&here) else { continue };
            if nodes.contains(next) {
                continue;
            }
            nodes.push(next.clone());
            links.push(l.id.clone());
            walk(topo, dst, weight, nodes, links, cost + weight(l), out);
            nodes.pop();
            links.pop();
        }
    }
    let mut out = Vec::new();
    walk(topo, dst, weight, &mut vec![src.clone()], &mut Vec::new(), 0.0, &mut out);
    out
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Scenario: `src_app` gets a key for `dst_app`, which then fetches it by id.
pub fn pair_scenario(src_app: &str, dst_app: &str) -> Scenario {
    Scenario::parse(
        &json!({
            "events": [
                {"event": "get_key", "at": 0, "app": src_app, "target": dst_app, "label": "initiator"},
                {"event": "get_key_with_id", "at": 10, "app": dst_app, "target": src_app,
                 "key_of": "initiator", "label": "target"}
            ],
            "expect": {"statuses": {"initiator": "ok", "target": "ok"}, "keys_equal": [["initiator", "target"]]}
        })
        .to_string(),
    )
    .unwrap()
}

pub fn run(topo: Topology, scenario: &Scenario, seed: u64) -> RunOutput {
    harness::run(Arc::new(topo), scenario, &RunOptions::seeded(seed)).unwrap()
}

pub fn run_with(topo: Topology, scenario: &Scenario, opts: RunOptions) -> RunOutput {
    harness::run(Arc::new(topo), scenario, &opts).unwrap()
}

pub fn run_file(topology: &str, scenario: &str, seed: u64) -> RunOutput {
    harness::run_files(&scenario_file(topology), &scenario_file(scenario), &RunOptions::seeded(seed)).unwrap()
}

pub fn count(trace: &[Envelope], ty: &str) -> usize {
    trace.iter().filter(|e| e.msg.type_name() == ty).count()
}

/// Records to or from the controller whose body has any key-material field.
pub fn controller_key_leaks(trace: &[Envelope]) -> Vec<usize> {
    let qusec = EntityName::qusec();
    trace
        .iter()
        .enumerate()
        .filter(|(_, e)| e.from == qusec || e.to == qusec)
        .filter(|(_, e)| {
            let v = e.to_value();
            let body = v["body"].as_object().cloned().unwrap_or_default();
            KEY_MATERIAL_FIELDS.iter().any(|f| body.contains_key(*f)) || e.msg.key_octets().is_some()
        })
        .map(|(i, _)| i)
        .collect()
}

/// For every `KeyRelay` in the trace: `(payload, K2, K1)` where K2 is the
/// encryption key looked up in the receiving KMS's pool and K1 the key the
/// initiator application finally received.
pub fn key_relay_triples(out: &RunOutput, k1: &[u8]) -> Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    out.trace
        .iter()
        .filter_map(|e| match &e.msg {
            Message::KeyRelay(m) => {
                let kms = out.network.kms(&KmsId::from(e.to.as_str())).expect("KeyRelay goes to a KMS");
                let k2 = kms
                    .pool()
                    .records()
                    .iter()
                    .find(|r| r.id == m.id_key_encryption)
                    .expect("encryption key exists in receiver pool")
                    .material
                    .as_bytes()
                    .to_vec();
                Some((m.encrypted_relay_key.as_bytes().to_vec(), k2, k1.to_vec()))
            }
            _ => None,
        })
        .collect()
}
