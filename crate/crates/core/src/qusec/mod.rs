//! Quantum Security Controller.
//!
//! Holds the global topology, answers KMS discovery, computes relay paths and
//! installs relay rules. It only ever exchanges control messages and never
//! sees key material.

mod path;

pub(crate) use path::cost_cmp;
pub use path::{compute_relay_path, shortest_path_by, PathError, RelayPath};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::actor::Ctx;
use crate::ids::{AppId, AssociationId, EntityName, KmsId, NodeId};
use crate::protocol::{KmsDiscoveryRequest, KmsDiscoveryResponse, Message, RelayPathInstall, Status};
pub use crate::topology::WeightPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Installed,
    Completed,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    /// Both applications share a link; no rules installed.
    Direct,
    /// Rules installed along a multi-link path.
    Relay,
}

/// Controller-side record of one resolved key establishment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub id_association: AssociationId,
    pub kind: SessionKind,
    pub initiator: AppId,
    pub target: AppId,
    /// Alternates peer-across-link and intra-node pairs, starting with a peer pair.
    pub kms_path: Vec<KmsId>,
    pub created_at: u64,
    pub status: SessionStatus,
}

impl SessionState {
    pub fn first_kms(&self) -> &KmsId {
        &self.kms_path[0]
    }

    pub fn last_kms(&self) -> &KmsId {
        self.kms_path.last().expect("non-empty path")
    }

    fn is_live(&self) -> bool {
        self.status != SessionStatus::Expired
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QusecDump {
    pub weight_policy: WeightPolicy,
    pub discovery_requests: u64,
    pub installs_sent: u64,
    pub sessions: Vec<SessionState>,
}

#[derive(Debug, Clone)]
pub struct Qusec {
    policy: WeightPolicy,
    session_lifetime_ms: Option<u64>,
    sessions: Vec<SessionState>,
    rng: ChaCha20Rng,
    discovery_requests: u64,
    installs_sent: u64,
}

/// Internal outcome of discovery before it is turned into a response.
type Resolution = Result<KmsId, Status>;

impl Qusec {
    pub fn new(policy: WeightPolicy, session_lifetime_ms: Option<u64>, seed: u64) -> Self {
        Self {
            policy,
            session_lifetime_ms,
            sessions: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            discovery_requests: 0,
            installs_sent: 0,
        }
    }

    pub fn policy(&self) -> WeightPolicy {
        self.policy
    }

    pub fn sessions(&self) -> &[SessionState] {
        &self.sessions
    }

    pub fn installs_sent(&self) -> u64 {
        self.installs_sent
    }

    pub fn dump(&self) -> QusecDump {
        QusecDump {
            weight_policy: self.policy,
            discovery_requests: self.discovery_requests,
            installs_sent: self.installs_sent,
            sessions: self.sessions.clone(),
        }
    }

    fn fresh_association(&mut self) -> AssociationId {
        let mut raw = [0u8; 16];
        self.rng.fill_bytes(&mut raw);
        AssociationId::new(hex::encode(raw))
    }

    /// Marks sessions older than the configured lifetime as expired.
    pub fn session_gc(&mut self, now: u64) -> usize {
        let Some(lifetime) = self.session_lifetime_ms else {
            return 0;
        };
        let mut expired = 0;
        for s in self.sessions.iter_mut().filter(|s| s.is_live()) {
            if now.saturating_sub(s.created_at) > lifetime {
                s.status = SessionStatus::Expired;
                expired += 1;
            }
        }
        expired
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, msg: Message) {
        match msg {
            Message::KmsDiscoveryRequest(m) => self.handle_kms_discovery(ctx, from, m),
            other => ctx.note(format!("QuSeC: unexpected {} from {from}", other.type_name())),
        }
    }

    pub fn handle_kms_discovery(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: KmsDiscoveryRequest) {
        self.discovery_requests += 1;
        self.session_gc(ctx.now);
        let resolution = self.resolve(ctx, from, &m);
        let (id_kms, status) = match resolution {
            Ok(kms) => (Some(kms), Status::Ok),
            Err(status) => (None, status),
        };
        ctx.send(
            from.clone(),
            Message::KmsDiscoveryResponse(KmsDiscoveryResponse {
                app_src: m.app_src,
                app_dst: m.app_dst,
                id_kms,
                status,
            }),
        );
    }

    fn resolve(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: &KmsDiscoveryRequest) -> Resolution {
        let topo = ctx.topology;
        let src = topo.resolve_app(&m.app_src).map_err(|_| Status::FailedUnknownApp)?.clone();
        let dst = topo.resolve_app(&m.app_dst).map_err(|_| Status::FailedUnknownApp)?.clone();
        if *from != EntityName::vkms(&src) {
            return Err(Status::FailedUnknownApp);
        }
        if src == dst {
            return Err(Status::FailedNoRule);
        }

        // Same link domain: the requester's end of the shared link serves it.
        if let Some(link) = topo.shared_link(&src, &dst, self.policy) {
            let here = KmsId::render(&src, &link.id);
            let there = KmsId::render(&dst, &link.id);
            let id_association = self.fresh_association();
            self.sessions.push(SessionState {
                id_association,
                kind: SessionKind::Direct,
                initiator: m.app_src.clone(),
                target: m.app_dst.clone(),
                kms_path: vec![here.clone(), there],
                created_at: ctx.now,
                status: SessionStatus::Completed,
            });
            return Ok(here);
        }

        // Requester is the target of a relay already installed.
        let reverse = |s: &&mut SessionState| {
            s.kind == SessionKind::Relay && s.initiator == m.app_dst && s.target == m.app_src
        };
        if let Some(s) = self.sessions.iter_mut().rev().filter(reverse).find(|s| s.is_live()) {
            s.status = SessionStatus::Completed;
            return Ok(s.last_kms().clone());
        }
        if self.sessions.iter_mut().any(|s| reverse(&s)) {
            // Only expired state remains; the relayed key is no longer reachable.
            return Err(Status::FailedNoRule);
        }

        self.install_relay(ctx, &src, &dst, m)
    }

    fn install_relay(&mut self, ctx: &mut Ctx<'_>, src: &NodeId, dst: &NodeId, m: &KmsDiscoveryRequest) -> Resolution {
        let path = compute_relay_path(ctx.topology, src, dst, self.policy)
            .map_err(|_| Status::FailedNoRule)?;
        let id_association = self.fresh_association();
        let hops = &path.kms;
        // Last to first, so downstream rules exist before the initiator acts.
        for i in (0..hops.len()).rev() {
            let install = RelayPathInstall {
                id_association: id_association.clone(),
                prev_hop: i.checked_sub(1).map(|p| hops[p].clone()),
                next_hop: hops.get(i + 1).cloned(),
                app_src: m.app_src.clone(),
                app_dst: m.app_dst.clone(),
            };
            ctx.send(hops[i].clone(), Message::RelayPathInstall(install));
            self.installs_sent += 1;
        }
        self.sessions.push(SessionState {
            id_association,
            kind: SessionKind::Relay,
            initiator: m.app_src.clone(),
            target: m.app_dst.clone(),
            kms_path: path.kms.clone(),
            created_at: ctx.now,
            status: SessionStatus::Installed,
        });
        Ok(path.kms[0].clone())
    }
}
