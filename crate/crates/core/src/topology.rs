//! Network model: nodes, QKD links, KMS instances and the application registry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AppId, EntityName, KmsId, LinkId, NodeId};

/// Default key size in octets (256-bit keys).
pub const DEFAULT_KEY_SIZE: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid topology: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown application {0}")]
    UnknownApp(AppId),
}

/// Link weight used by path computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// Every link costs 1.
    HopCount,
    /// A link costs `1 / key_rate`, favouring fast links.
    InverseKeyRate,
    /// A link costs its fibre length in kilometres.
    Distance,
}

impl WeightPolicy {
    pub const ALL: [WeightPolicy; 3] = [
        WeightPolicy::HopCount,
        WeightPolicy::InverseKeyRate,
        WeightPolicy::Distance,
    ];

    pub fn weight(self, link: &Link) -> f64 {
        match self {
            WeightPolicy::HopCount => 1.0,
            WeightPolicy::InverseKeyRate => 1.0 / link.key_rate,
            WeightPolicy::Distance => link.distance_km,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightPolicy::HopCount => "hop_count",
            WeightPolicy::InverseKeyRate => "inverse_key_rate",
            WeightPolicy::Distance => "distance",
        }
    }
}

impl fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WeightPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown weight policy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    /// A node with a single QKD module.
    Simple,
    /// A node with two or more QKD modules, able to relay keys.
    TrustedRelay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
    /// One KMS per incident link, in link declaration order.
    pub kms_ids: Vec<KmsId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    /// Keys per second.
    pub key_rate: f64,
    pub distance_km: f64,
    /// Keys generated before the first request.
    pub initial_pool: u64,
}

impl Link {
    pub fn touches(&self, node: &NodeId) -> bool {
        &self.a == node || &self.b == node
    }

    /// The far endpoint as seen from `node`.
    pub fn other(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.a == node {
            Some(&self.b)
        } else if &self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// A validated, immutable network model.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    apps: BTreeMap<AppId, NodeId>,
    weight_policy: WeightPolicy,
    key_size: usize,
    kms: BTreeMap<KmsId, (NodeId, LinkId)>,
}

// On-disk schema.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    nodes: Vec<NodeEntry>,
    links: Vec<LinkEntry>,
    #[serde(default)]
    apps: Vec<AppEntry>,
    weight_policy: WeightPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: NodeId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    id: LinkId,
    a: NodeId,
    b: NodeId,
    key_rate: f64,
    distance_km: f64,
    initial_pool: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppEntry {
    id: AppId,
    node: NodeId,
}

/// Parses and validates a topology file.
pub fn load_topology(config_text: &str) -> Result<Topology, TopologyError> {
    let file: TopologyFile =
        serde_json::from_str(config_text).map_err(|e| TopologyError::Parse(e.to_string()))?;
    Topology::build(file)
}

impl Topology {
    fn build(file: TopologyFile) -> Result<Self, TopologyError> {
        let mut errors = Vec::new();

        let mut node_ids = BTreeSet::new();
        for n in &file.nodes {
            if !node_ids.insert(n.id.clone()) {
                errors.push(format!("duplicate node {}", n.id));
            }
        }
        if file.nodes.is_empty() {
            errors.push("topology has no nodes".to_owned());
        }

        let mut link_ids = BTreeSet::new();
        for l in &file.links {
            if !link_ids.insert(l.id.clone()) {
                errors.push(format!("duplicate link {}", l.id));
            }
            for end in [&l.a, &l.b] {
                if !node_ids.contains(end) {
                    errors.push(format!("unknown node {end}"));
                }
            }
            if l.a == l.b {
                errors.push(format!("link {} connects node {} to itself", l.id, l.a));
            }
            if !(l.key_rate.is_finite() && l.key_rate > 0.0) {
                errors.push(format!("link {} has non-positive key_rate {}", l.id, l.key_rate));
            }
            if !(l.distance_km.is_finite() && l.distance_km > 0.0) {
                errors.push(format!(
                    "link {} has non-positive distance_km {}",
                    l.id, l.distance_km
                ));
            }
        }

        let mut apps = BTreeMap::new();
        for app in &file.apps {
            if !node_ids.contains(&app.node) {
                errors.push(format!("application {} references unknown node {}", app.id, app.node));
            }
            if apps.insert(app.id.clone(), app.node.clone()).is_some() {
                errors.push(format!("duplicate application {}", app.id));
            }
        }

        let key_size = file.key_size.unwrap_or(DEFAULT_KEY_SIZE);
        if key_size == 0 {
            errors.push("key_size must be positive".to_owned());
        }

        if !errors.is_empty() {
            return Err(TopologyError::Validation(errors));
        }

        let links: Vec<Link> = file
            .links
            .into_iter()
            .map(|l| Link {
                id: l.id,
                a: l.a,
                b: l.b,
                key_rate: l.key_rate,
                distance_km: l.distance_km,
                initial_pool: l.initial_pool,
            })
            .collect();

        let mut kms = BTreeMap::new();
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for entry in file.nodes {
            let mut kms_ids = Vec::new();
            for l in links.iter().filter(|l| l.touches(&entry.id)) {
                let id = KmsId::render(&entry.id, &l.id);
                if kms.insert(id.clone(), (entry.id.clone(), l.id.clone())).is_some() {
                    errors.push(format!("KMS name {id} is not unique"));
                }
                kms_ids.push(id);
            }
            let role = match kms_ids.len() {
                0 => {
                    errors.push(format!("node {} has no QKD link", entry.id));
                    NodeRole::Simple
                }
                1 => NodeRole::Simple,
                _ => NodeRole::TrustedRelay,
            };
            nodes.push(Node { id: entry.id, role, kms_ids });
        }

        let topo = Topology {
            nodes,
            links,
            apps,
            weight_policy: file.weight_policy,
            key_size,
            kms,
        };

        // Every transport address must be unambiguous.
        let mut names = BTreeSet::new();
        names.insert(EntityName::qusec());
        for name in topo.entity_names_unchecked() {
            if !names.insert(name.clone()) {
                errors.push(format!("entity name {name} is not unique"));
            }
        }

        if errors.is_empty() && !topo.is_connected() {
            errors.push("graph is disconnected".to_owned());
        }

        if errors.is_empty() {
            Ok(topo)
        } else {
            Err(TopologyError::Validation(errors))
        }
    }

    fn entity_names_unchecked(&self) -> Vec<EntityName> {
        let mut out: Vec<EntityName> = self.apps.keys().map(EntityName::from).collect();
        out.extend(self.nodes.iter().map(|n| EntityName::vkms(&n.id)));
        out.extend(self.kms.keys().map(EntityName::from));
        out
    }

    fn is_connected(&self) -> bool {
        let Some(start) = self.nodes.first() else {
            return true;
        };
        let mut seen = BTreeSet::from([&start.id]);
        let mut queue = VecDeque::from([&start.id]);
        while let Some(u) = queue.pop_front() {
            for l in self.links.iter().filter(|l| l.touches(u)) {
                let v = l.other(u).expect("incident link");
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Serializes back to the topology file schema.
    pub fn to_json(&self) -> String {
        let file = TopologyFile {
            nodes: self.nodes.iter().map(|n| NodeEntry { id: n.id.clone() }).collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkEntry {
                    id: l.id.clone(),
                    a: l.a.clone(),
                    b: l.b.clone(),
                    key_rate: l.key_rate,
                    distance_km: l.distance_km,
                    initial_pool: l.initial_pool,
                })
                .collect(),
            apps: self
                .apps
                .iter()
                .map(|(id, node)| AppEntry { id: id.clone(), node: node.clone() })
                .collect(),
            weight_policy: self.weight_policy,
            key_size: (self.key_size != DEFAULT_KEY_SIZE).then_some(self.key_size),
        };
        serde_json::to_string_pretty(&file).expect("topology serializes")
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: &LinkId) -> Option<&Link> {
        self.links.iter().find(|l| &l.id == id)
    }

    /// Links incident to `node`, in declaration order.
    pub fn incident_links<'a>(&'a self, node: &'a NodeId) -> impl Iterator<Item = &'a Link> + 'a {
        self.links.iter().filter(move |l| l.touches(node))
    }

    pub fn apps(&self) -> &BTreeMap<AppId, NodeId> {
        &self.apps
    }

    pub fn weight_policy(&self) -> WeightPolicy {
        self.weight_policy
    }

    pub fn key_size(&self) -> usize {
        self.key_size
    }

    /// All KMS instances with the node and link each one serves.
    pub fn kms(&self) -> &BTreeMap<KmsId, (NodeId, LinkId)> {
        &self.kms
    }

    /// Recovers the `(node, link)` pair behind a rendered KMS name.
    pub fn kms_endpoint(&self, kms: &KmsId) -> Option<(&NodeId, &LinkId)> {
        self.kms.get(kms).map(|(n, l)| (n, l))
    }

    /// The KMS on the other end of `kms`'s link.
    pub fn kms_peer(&self, kms: &KmsId) -> Option<KmsId> {
        let (node, link) = self.kms_endpoint(kms)?;
        let other = self.link(link)?.other(node)?;
        Some(KmsId::render(other, link))
    }

    pub fn kms_for(&self, node: &NodeId, link: &LinkId) -> Option<KmsId> {
        let id = KmsId::render(node, link);
        self.kms.contains_key(&id).then_some(id)
    }

    pub fn resolve_app(&self, app: &AppId) -> Result<&NodeId, TopologyError> {
        self.apps
            .get(app)
            .ok_or_else(|| TopologyError::UnknownApp(app.clone()))
    }

    /// Cheapest link joining `u` and `v` under `policy`, lowest id on ties.
    /// `None` unless the nodes are adjacent.
    pub fn shared_link(&self, u: &NodeId, v: &NodeId, policy: WeightPolicy) -> Option<&Link> {
        self.links
            .iter()
            .filter(|l| l.touches(u) && l.other(u) == Some(v))
            .min_by(|x, y| {
                crate::qusec::cost_cmp(policy.weight(x), policy.weight(y)).then_with(|| x.id.cmp(&y.id))
            })
    }

    /// Node hosting an entity, or `None` for the controller and unknown names.
    pub fn entity_node(&self, name: &EntityName) -> Option<&NodeId> {
        if let Some(node) = self.apps.get(&AppId::from(name.as_str())) {
            return Some(node);
        }
        if let Some((node, _)) = self.kms.get(&KmsId::from(name.as_str())) {
            return Some(node);
        }
        self.nodes
            .iter()
            .find(|n| EntityName::vkms(&n.id) == *name)
            .map(|n| &n.id)
    }

    /// Returns a copy with a different global weight policy.
    pub fn with_weight_policy(&self, policy: WeightPolicy) -> Topology {
        Topology { weight_policy: policy, ..self.clone() }
    }

    /// Returns a copy with one link's initial pool replaced.
    pub fn with_initial_pool(&self, link: &LinkId, initial_pool: u64) -> Topology {
        let mut t = self.clone();
        for l in t.links.iter_mut().filter(|l| &l.id == link) {
            l.initial_pool = initial_pool;
        }
        t
    }
}
