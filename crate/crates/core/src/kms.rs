//! Local KMS bound to one end of a QKD link.
//!
//! Serves keys directly to the local vKMS and runs the hop-by-hop relay
//! procedure. The end-to-end key `K1` is drawn once, on the first link of the
//! path. Every later link re-encrypts it with a fresh link key `K2` as
//! `K3 = K1 ^ K2`, and the far end decrypts it again. Between two KMSs of
//! the same node, `K1` travels in plaintext.
//!
//! Completion statuses travel back along the chain:
//! `KeyRelayResponse` (peer) then `AckRequest` (intra-node) then
//! `RelayProcessResponse` (peer), and finally a `KeyDelivery` to the vKMS.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::actor::{Ctx, TimerToken};
use crate::ids::{AppId, AssociationId, EntityName, KeyId, KmsId, LinkId, NodeId};
use crate::linksim::{KeyPool, KeyRecord, Side};
use crate::octets::Octets;
use crate::protocol::{
    otp_xor_octets, AckRequest, ExtKeyRequest, GetKey, GetKeyWithId, KeyDelivery, KeyRelay,
    KeyRelayResponse, Message, RelayPathInstall, RelayProcessRequest, RelayProcessResponse,
    Status,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayRule {
    pub id_association: AssociationId,
    /// `None` on the KMS that starts the relay.
    pub prev_hop: Option<KmsId>,
    /// `None` on the KMS that terminates the relay.
    pub next_hop: Option<KmsId>,
    pub app_src: AppId,
    pub app_dst: AppId,
    #[serde(skip)]
    installed: u64,
}

impl RelayRule {
    pub fn is_initiator(&self) -> bool {
        self.prev_hop.is_none()
    }

    pub fn is_terminal(&self) -> bool {
        self.next_hop.is_none()
    }
}

/// Key held at the end of a relay until the target application picks it up.
#[derive(Debug, Clone, PartialEq)]
struct DeliveredKey {
    material: Octets,
    stored_at: u64,
}

/// Requests waiting for a completion, keyed by the relayed key id.
#[derive(Debug, Clone)]
enum Pending {
    /// Relay started here; waiting for `RelayProcessResponse` from the peer.
    Initiator { k1: KeyRecord, requester: EntityName, timer: TimerToken },
    /// Received `RelayProcessRequest`; waiting for `AckRequest` from the next KMS on this node.
    RelayProcess { requester: KmsId },
    /// Sent `KeyRelay` on behalf of `requester`; waiting for `KeyRelayResponse`.
    ExtKey { requester: KmsId, app_src: AppId, app_dst: AppId, timer: TimerToken },
    /// Decrypted a `KeyRelay` and forwarded it; waiting for `AckRequest`.
    Forward { upstream: KmsId },
}

#[derive(Debug, Clone)]
pub struct Kms {
    id: KmsId,
    node: NodeId,
    link: LinkId,
    peer: KmsId,
    pool: KeyPool,
    rules: BTreeMap<AssociationId, RelayRule>,
    installs: u64,
    delivered: BTreeMap<(KeyId, AppId, AppId), DeliveredKey>,
    delivered_ttl_ms: Option<u64>,
    pending: HashMap<KeyId, Pending>,
    timers: HashMap<TimerToken, KeyId>,
    next_token: TimerToken,
    served: u64,
}

impl Kms {
    pub fn new(id: KmsId, node: NodeId, link: LinkId, peer: KmsId, side: Side) -> Self {
        Self {
            id,
            node,
            pool: KeyPool::new(link.clone(), side),
            link,
            peer,
            rules: BTreeMap::new(),
            installs: 0,
            delivered: BTreeMap::new(),
            delivered_ttl_ms: None,
            pending: HashMap::new(),
            timers: HashMap::new(),
            next_token: 0,
            served: 0,
        }
    }

    /// Sets how long a relayed key waits for pickup at the terminal KMS.
    pub fn set_delivered_ttl(&mut self, ttl_ms: Option<u64>) {
        self.delivered_ttl_ms = ttl_ms;
    }

    pub fn id(&self) -> &KmsId {
        &self.id
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn link(&self) -> &LinkId {
        &self.link
    }

    pub fn peer(&self) -> &KmsId {
        &self.peer
    }

    pub fn pool(&self) -> &KeyPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut KeyPool {
        &mut self.pool
    }

    pub fn rules(&self) -> &BTreeMap<AssociationId, RelayRule> {
        &self.rules
    }

    pub fn rule(&self, id: &AssociationId) -> Option<&RelayRule> {
        self.rules.get(id)
    }

    /// Keys stored for target-side pickup, as `(key id, initiator app, target app)`.
    pub fn delivered_keys(&self) -> impl Iterator<Item = (&KeyId, &AppId, &AppId)> {
        self.delivered.keys().map(|(k, s, d)| (k, s, d))
    }

    pub fn delivered_material(&self, key: &KeyId, app_src: &AppId, app_dst: &AppId) -> Option<&Octets> {
        self.delivered
            .get(&(key.clone(), app_src.clone(), app_dst.clone()))
            .map(|d| &d.material)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Number of application requests answered.
    pub fn served(&self) -> u64 {
        self.served
    }

    fn token(&mut self, key: &KeyId) -> TimerToken {
        let t = self.next_token;
        self.next_token += 1;
        self.timers.insert(t, key.clone());
        t
    }

    fn cancel(&mut self, ctx: &mut Ctx<'_>, token: TimerToken) {
        self.timers.remove(&token);
        ctx.cancel_timer(token);
    }

    /// Stores or overwrites the rule for an association. Idempotent.
    pub fn install_rule(&mut self, msg: RelayPathInstall) {
        let installed = match self.rules.get(&msg.id_association) {
            Some(existing)
                if existing.prev_hop == msg.prev_hop
                    && existing.next_hop == msg.next_hop
                    && existing.app_src == msg.app_src
                    && existing.app_dst == msg.app_dst =>
            {
                return;
            }
            _ => {
                self.installs += 1;
                self.installs
            }
        };
        self.rules.insert(
            msg.id_association.clone(),
            RelayRule {
                id_association: msg.id_association,
                prev_hop: msg.prev_hop,
                next_hop: msg.next_hop,
                app_src: msg.app_src,
                app_dst: msg.app_dst,
                installed,
            },
        );
    }

    /// Most recently installed rule for an app pair satisfying `pred`.
    fn latest_rule(
        &self,
        app_src: &AppId,
        app_dst: &AppId,
        pred: impl Fn(&RelayRule) -> bool,
    ) -> Option<&RelayRule> {
        self.rules
            .values()
            .filter(|r| &r.app_src == app_src && &r.app_dst == app_dst && pred(r))
            .max_by_key(|r| r.installed)
    }

    fn is_local(&self, ctx: &Ctx<'_>, other: &KmsId) -> bool {
        other != &self.id
            && ctx.topology.kms_endpoint(other).map(|(n, _)| n) == Some(&self.node)
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, msg: Message) {
        match msg {
            Message::RelayPathInstall(m) => {
                if from.is_qusec() {
                    self.install_rule(m);
                } else {
                    ctx.note(format!("{}: ignored rule install from {from}", self.id));
                }
            }
            Message::GetKey(m) => self.handle_get_key(ctx, from, m),
            Message::GetKeyWithId(m) => self.handle_get_key_with_id(ctx, from, m),
            Message::RelayProcessRequest(m) => self.handle_relay_process_request(ctx, from, m),
            Message::ExtKeyRequest(m) => self.handle_ext_key_request(ctx, from, m),
            Message::KeyRelay(m) => self.handle_key_relay(ctx, from, m),
            Message::KeyRelayResponse(m) => self.on_key_relay_response(ctx, m),
            Message::AckRequest(m) => self.on_ack_request(ctx, m),
            Message::RelayProcessResponse(m) => self.on_relay_process_response(ctx, m),
            other => ctx.note(format!(
                "{}: unexpected {} from {from}",
                self.id,
                other.type_name()
            )),
        }
    }

    fn deliver(&mut self, ctx: &mut Ctx<'_>, to: &EntityName, delivery: KeyDelivery) {
        self.served += 1;
        ctx.send(to.clone(), Message::KeyDelivery(delivery));
    }

    fn handle_get_key(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: GetKey) {
        let initiator = self
            .latest_rule(&m.app_src, &m.app_dst, RelayRule::is_initiator)
            .cloned();
        let Some(rule) = initiator else {
            // Direct delivery within this link domain.
            let delivery = match self.pool.reserve_next() {
                Some(k) => {
                    self.pool.consume(&k.id);
                    KeyDelivery::ok(k.id, k.material)
                }
                None => KeyDelivery::failed(Status::FailedNoKey),
            };
            return self.deliver(ctx, from, delivery);
        };

        if rule.next_hop.as_ref() != Some(&self.peer) {
            return self.deliver(ctx, from, KeyDelivery::failed(Status::FailedNoRule));
        }
        let Some(k1) = self.pool.reserve_next() else {
            return self.deliver(ctx, from, KeyDelivery::failed(Status::FailedNoKey));
        };
        let timer = self.token(&k1.id);
        ctx.set_timeout(timer);
        ctx.send(
            self.peer.clone(),
            Message::RelayProcessRequest(RelayProcessRequest {
                app_src: m.app_src,
                app_dst: m.app_dst,
                id_relay_key: k1.id.clone(),
            }),
        );
        self.pending.insert(
            k1.id.clone(),
            Pending::Initiator { k1, requester: from.clone(), timer },
        );
    }

    fn handle_get_key_with_id(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: GetKeyWithId) {
        // The requester is the target; the store is keyed by (initiator, target).
        let slot = (m.key_id.clone(), m.app_dst.clone(), m.app_src.clone());
        if let Some(stored) = self.delivered.remove(&slot) {
            let live = self
                .delivered_ttl_ms
                .is_none_or(|ttl| ctx.now < stored.stored_at.saturating_add(ttl));
            let delivery = if live {
                KeyDelivery::ok(m.key_id, stored.material)
            } else {
                KeyDelivery::failed(Status::FailedNoKey)
            };
            return self.deliver(ctx, from, delivery);
        }
        let delivery = match self.pool.take_by_id(&m.key_id) {
            Some(material) => KeyDelivery::ok(m.key_id, material),
            None => KeyDelivery::failed(Status::FailedNoKey),
        };
        self.deliver(ctx, from, delivery);
    }

    fn handle_relay_process_request(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: RelayProcessRequest) {
        let reply = |ctx: &mut Ctx<'_>, status: Status, id: KeyId| {
            ctx.send(
                from.clone(),
                Message::RelayProcessResponse(RelayProcessResponse { status, id_relay_key: id }),
            );
        };
        let sender = KmsId::from(from.as_str());
        if sender != self.peer {
            return reply(ctx, Status::FailedNoRule, m.id_relay_key);
        }
        let Some(rule) = self
            .latest_rule(&m.app_src, &m.app_dst, |r| r.prev_hop.as_ref() == Some(&sender))
            .cloned()
        else {
            return reply(ctx, Status::FailedNoRule, m.id_relay_key);
        };
        let next = match &rule.next_hop {
            Some(n) if self.is_local(ctx, n) => Some(n.clone()),
            Some(_) => return reply(ctx, Status::FailedNoRule, m.id_relay_key),
            None => None,
        };
        let Some(k1) = self.pool.take_by_id(&m.id_relay_key) else {
            return reply(ctx, Status::FailedNoKey, m.id_relay_key);
        };
        let Some(next) = next else {
            // A one-link relay ends here.
            self.store_delivered(ctx, m.id_relay_key.clone(), m.app_src, m.app_dst, k1);
            return reply(ctx, Status::Ok, m.id_relay_key);
        };
        self.pending.insert(
            m.id_relay_key.clone(),
            Pending::RelayProcess { requester: sender },
        );
        ctx.send(
            next,
            Message::ExtKeyRequest(ExtKeyRequest {
                id_relay_key: m.id_relay_key,
                value_relay_key: k1,
                app_src: m.app_src,
                app_dst: m.app_dst,
                id_association: rule.id_association,
                ext: Default::default(),
            }),
        );
    }

    fn handle_ext_key_request(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: ExtKeyRequest) {
        let requester = KmsId::from(from.as_str());
        let ack = |ctx: &mut Ctx<'_>, status: Status, m: &ExtKeyRequest| {
            ctx.send(
                from.clone(),
                Message::AckRequest(AckRequest {
                    id_relay_key: m.id_relay_key.clone(),
                    ack_status: status,
                    app_src: m.app_src.clone(),
                    app_dst: m.app_dst.clone(),
                    ext: Default::default(),
                }),
            );
        };
        let rule_ok = self.rules.get(&m.id_association).is_some_and(|r| {
            r.next_hop.as_ref() == Some(&self.peer) && r.prev_hop.as_ref() == Some(&requester)
        });
        if !rule_ok || !self.is_local(ctx, &requester) {
            return ack(ctx, Status::FailedNoRule, &m);
        }
        let Some(k2) = self.pool.reserve_next() else {
            return ack(ctx, Status::FailedNoKey, &m);
        };
        self.pool.consume(&k2.id);
        let Ok(k3) = otp_xor_octets(&m.value_relay_key, &k2.material) else {
            return ack(ctx, Status::FailedDecrypt, &m);
        };
        let timer = self.token(&m.id_relay_key);
        ctx.set_timeout(timer);
        self.pending.insert(
            m.id_relay_key.clone(),
            Pending::ExtKey {
                requester,
                app_src: m.app_src.clone(),
                app_dst: m.app_dst.clone(),
                timer,
            },
        );
        ctx.send(
            self.peer.clone(),
            Message::KeyRelay(KeyRelay {
                encrypted_relay_key: k3,
                id_key_encryption: k2.id,
                id_relay_key: m.id_relay_key,
                app_src: m.app_src,
                app_dst: m.app_dst,
                id_association: m.id_association,
            }),
        );
    }

    fn handle_key_relay(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: KeyRelay) {
        let reply = |ctx: &mut Ctx<'_>, status: Status, id: &KeyId| {
            ctx.send(
                from.clone(),
                Message::KeyRelayResponse(KeyRelayResponse { status, id_relay_key: id.clone() }),
            );
        };
        let sender = KmsId::from(from.as_str());
        let Some(rule) = self
            .rules
            .get(&m.id_association)
            .filter(|r| sender == self.peer && r.prev_hop.as_ref() == Some(&sender))
            .cloned()
        else {
            return reply(ctx, Status::FailedNoRule, &m.id_relay_key);
        };
        let Some(k2) = self.pool.take_by_id(&m.id_key_encryption) else {
            return reply(ctx, Status::FailedDecrypt, &m.id_relay_key);
        };
        let Ok(k1) = otp_xor_octets(&m.encrypted_relay_key, &k2) else {
            return reply(ctx, Status::FailedDecrypt, &m.id_relay_key);
        };
        match rule.next_hop {
            None => {
                self.store_delivered(ctx, m.id_relay_key.clone(), m.app_src, m.app_dst, k1);
                reply(ctx, Status::Ok, &m.id_relay_key);
            }
            Some(next) if self.is_local(ctx, &next) => {
                self.pending
                    .insert(m.id_relay_key.clone(), Pending::Forward { upstream: sender });
                ctx.send(
                    next,
                    Message::ExtKeyRequest(ExtKeyRequest {
                        id_relay_key: m.id_relay_key,
                        value_relay_key: k1,
                        app_src: m.app_src,
                        app_dst: m.app_dst,
                        id_association: m.id_association,
                        ext: Default::default(),
                    }),
                );
            }
            Some(_) => reply(ctx, Status::FailedNoRule, &m.id_relay_key),
        }
    }

    fn store_delivered(&mut self, ctx: &Ctx<'_>, key: KeyId, app_src: AppId, app_dst: AppId, material: Octets) {
        self.delivered
            .insert((key, app_src, app_dst), DeliveredKey { material, stored_at: ctx.now });
    }

    fn orphan(&self, ctx: &mut Ctx<'_>, what: &str, key: &KeyId) {
        ctx.note(format!("{}: dropped orphan {what} for key {key}", self.id));
    }

    fn on_key_relay_response(&mut self, ctx: &mut Ctx<'_>, m: KeyRelayResponse) {
        match self.pending.remove(&m.id_relay_key) {
            Some(Pending::ExtKey { requester, app_src, app_dst, timer }) => {
                self.cancel(ctx, timer);
                ctx.send(
                    requester,
                    Message::AckRequest(AckRequest {
                        id_relay_key: m.id_relay_key,
                        ack_status: m.status,
                        app_src,
                        app_dst,
                        ext: Default::default(),
                    }),
                );
            }
            other => {
                self.restore(&m.id_relay_key, other);
                self.orphan(ctx, "KeyRelayResponse", &m.id_relay_key);
            }
        }
    }

    fn on_ack_request(&mut self, ctx: &mut Ctx<'_>, m: AckRequest) {
        match self.pending.remove(&m.id_relay_key) {
            Some(Pending::RelayProcess { requester }) => ctx.send(
                requester,
                Message::RelayProcessResponse(RelayProcessResponse {
                    status: m.ack_status,
                    id_relay_key: m.id_relay_key,
                }),
            ),
            Some(Pending::Forward { upstream }) => ctx.send(
                upstream,
                Message::KeyRelayResponse(KeyRelayResponse {
                    status: m.ack_status,
                    id_relay_key: m.id_relay_key,
                }),
            ),
            other => {
                self.restore(&m.id_relay_key, other);
                self.orphan(ctx, "AckRequest", &m.id_relay_key);
            }
        }
    }

    fn on_relay_process_response(&mut self, ctx: &mut Ctx<'_>, m: RelayProcessResponse) {
        match self.pending.remove(&m.id_relay_key) {
            Some(Pending::Initiator { k1, requester, timer }) => {
                self.cancel(ctx, timer);
                // K1 is spent whatever the outcome.
                self.pool.consume(&k1.id);
                let delivery = if m.status.is_ok() {
                    KeyDelivery::ok(k1.id, k1.material)
                } else {
                    KeyDelivery::failed(m.status)
                };
                self.deliver(ctx, &requester, delivery);
            }
            other => {
                self.restore(&m.id_relay_key, other);
                self.orphan(ctx, "RelayProcessResponse", &m.id_relay_key);
            }
        }
    }

    fn restore(&mut self, key: &KeyId, pending: Option<Pending>) {
        if let Some(p) = pending {
            self.pending.insert(key.clone(), p);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: TimerToken) {
        let Some(key) = self.timers.remove(&token) else {
            return;
        };
        match self.pending.remove(&key) {
            Some(Pending::Initiator { k1, requester, .. }) => {
                self.pool.consume(&k1.id);
                self.deliver(ctx, &requester, KeyDelivery::failed(Status::FailedTimeout));
            }
            Some(Pending::ExtKey { requester, app_src, app_dst, .. }) => ctx.send(
                requester,
                Message::AckRequest(AckRequest {
                    id_relay_key: key,
                    ack_status: Status::FailedTimeout,
                    app_src,
                    app_dst,
                    ext: Default::default(),
                }),
            ),
            other => self.restore(&key, other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::LinkSim;
    use crate::topology::{load_topology, Topology};

    const MESH4: &str = include_str!("../scenarios/mesh4.json");

    fn topo() -> Topology {
        load_topology(MESH4).unwrap()
    }

    /// Builds the two KMSs of `link` with `n` synchronized keys.
    fn pair(t: &Topology, link: &str, n: u64) -> (Kms, Kms) {
        let l = t.link(&link.into()).unwrap();
        let ka = KmsId::render(&l.a, &l.id);
        let kb = KmsId::render(&l.b, &l.id);
        let mut a = Kms::new(ka.clone(), l.a.clone(), l.id.clone(), kb.clone(), Side::A);
        let mut b = Kms::new(kb, l.b.clone(), l.id.clone(), ka, Side::B);
        LinkSim::new(l.id.clone(), 1.0, 32, 9).generate_keys(n, &mut a.pool, &mut b.pool);
        (a, b)
    }

    fn install(assoc: &str, prev: Option<&str>, next: Option<&str>) -> RelayPathInstall {
        RelayPathInstall {
            id_association: assoc.into(),
            prev_hop: prev.map(KmsId::from),
            next_hop: next.map(KmsId::from),
            app_src: "APP_A".into(),
            app_dst: "APP_B".into(),
        }
    }

    fn get_key() -> GetKey {
        GetKey { app_src: "APP_A".into(), app_dst: "APP_B".into() }
    }

    fn only(ctx: &mut Ctx<'_>) -> (EntityName, Message) {
        let mut out = ctx.take_outgoing();
        assert_eq!(out.len(), 1, "{out:?}");
        out.pop().unwrap()
    }

    #[test]
    fn rule_install_is_idempotent() {
        let t = topo();
        let (_, mut k3d) = pair(&t, "d", 0);
        let k3d_rule = install("A1", Some("KMS_3b"), Some("KMS_4d"));
        k3d.install_rule(k3d_rule.clone());
        let before = k3d.rules().clone();
        k3d.install_rule(k3d_rule);
        assert_eq!(k3d.rules(), &before);
        let (_, mut k4d) = pair(&t, "d", 0);
        k4d.install_rule(install("A1", Some("KMS_3d"), None));
        assert!(k4d.rule(&"A1".into()).unwrap().is_terminal());
    }

    #[test]
    fn direct_get_key_then_get_key_with_id() {
        let t = topo();
        let (mut k3d, mut k4d) = pair(&t, "d", 4);
        let mut ctx = Ctx::new(0, &t, 1000);
        k3d.handle(&mut ctx, &"vKMS_3".into(), Message::GetKey(get_key()));
        let (to, msg) = only(&mut ctx);
        assert_eq!(to.as_str(), "vKMS_3");
        let Message::KeyDelivery(d) = msg else { panic!() };
        assert_eq!(d.status, Status::Ok);

        let req = GetKeyWithId {
            app_src: "APP_B".into(),
            app_dst: "APP_A".into(),
            key_id: d.key_id.clone().unwrap(),
        };
        k4d.handle(&mut ctx, &"vKMS_4".into(), Message::GetKeyWithId(req.clone()));
        let (_, Message::KeyDelivery(d2)) = only(&mut ctx) else { panic!() };
        assert_eq!(d2.material, d.material);
        // A key can be picked up once.
        k4d.handle(&mut ctx, &"vKMS_4".into(), Message::GetKeyWithId(req));
        let (_, Message::KeyDelivery(d3)) = only(&mut ctx) else { panic!() };
        assert_eq!(d3.status, Status::FailedNoKey);
    }

    #[test]
    fn empty_pool_fails_with_no_key() {
        let t = topo();
        let (mut k3d, _) = pair(&t, "d", 0);
        let mut ctx = Ctx::new(0, &t, 1000);
        k3d.handle(&mut ctx, &"vKMS_3".into(), Message::GetKey(get_key()));
        let (_, Message::KeyDelivery(d)) = only(&mut ctx) else { panic!() };
        assert_eq!(d, KeyDelivery::failed(Status::FailedNoKey));
    }

    #[test]
    fn initiator_emits_relay_process_request_and_waits() {
        let t = topo();
        let (mut k1b, _) = pair(&t, "b", 2);
        k1b.install_rule(install("A1", None, Some("KMS_3b")));
        let mut ctx = Ctx::new(0, &t, 1000);
        k1b.handle(&mut ctx, &"vKMS_1".into(), Message::GetKey(get_key()));
        assert_eq!(ctx.pending_timers().len(), 1);
        let (to, Message::RelayProcessRequest(rpr)) = only(&mut ctx) else { panic!() };
        assert_eq!(to.as_str(), "KMS_3b");
        assert_eq!(k1b.pending_count(), 1);

        k1b.handle(
            &mut ctx,
            &"KMS_3b".into(),
            Message::RelayProcessResponse(RelayProcessResponse {
                status: Status::Ok,
                id_relay_key: rpr.id_relay_key.clone(),
            }),
        );
        let (to, Message::KeyDelivery(d)) = only(&mut ctx) else { panic!() };
        assert_eq!(to.as_str(), "vKMS_1");
        assert_eq!(d.key_id, Some(rpr.id_relay_key));
        assert_eq!(k1b.pending_count(), 0);
        assert_eq!(k1b.pool().counters().consumed, 1);
    }

    #[test]
    fn relay_process_request_forwards_plaintext_intra_node() {
        let t = topo();
        let (k1b, mut k3b) = pair(&t, "b", 2);
        k3b.install_rule(install("A1", Some("KMS_1b"), Some("KMS_3d")));
        let k1 = k1b.pool().records()[0].clone();
        let mut ctx = Ctx::new(0, &t, 1000);
        k3b.handle(
            &mut ctx,
            &"KMS_1b".into(),
            Message::RelayProcessRequest(RelayProcessRequest {
                app_src: "APP_A".into(),
                app_dst: "APP_B".into(),
                id_relay_key: k1.id.clone(),
            }),
        );
        let (to, Message::ExtKeyRequest(ext)) = only(&mut ctx) else { panic!() };
        assert_eq!(to.as_str(), "KMS_3d");
        assert_eq!(ext.value_relay_key, k1.material);
        assert_eq!(ext.id_association.as_str(), "A1");
    }

    #[test]
    fn relay_process_request_without_rule_or_key() {
        let t = topo();
        let (k1b, mut k3b) = pair(&t, "b", 2);
        let k1 = k1b.pool().records()[0].id.clone();
        let rpr = || {
            Message::RelayProcessRequest(RelayProcessRequest {
                app_src: "APP_A".into(),
                app_dst: "APP_B".into(),
                id_relay_key: k1.clone(),
            })
        };
        let mut ctx = Ctx::new(0, &t, 1000);
        k3b.handle(&mut ctx, &"KMS_1b".into(), rpr());
        let (_, Message::RelayProcessResponse(r)) = only(&mut ctx) else { panic!() };
        assert_eq!(r.status, Status::FailedNoRule);

        k3b.install_rule(install("A1", Some("KMS_1b"), Some("KMS_3d")));
        k3b.pool_mut().remove(&k1);
        k3b.handle(&mut ctx, &"KMS_1b".into(), rpr());
        let (_, Message::RelayProcessResponse(r)) = only(&mut ctx) else { panic!() };
        assert_eq!(r.status, Status::FailedNoKey);
    }

    fn ext_request(k1: &KeyRecord) -> Message {
        Message::ExtKeyRequest(ExtKeyRequest {
            id_relay_key: k1.id.clone(),
            value_relay_key: k1.material.clone(),
            app_src: "APP_A".into(),
            app_dst: "APP_B".into(),
            id_association: "A1".into(),
            ext: Default::default(),
        })
    }

    #[test]
    fn ext_key_request_encrypts_with_link_key() {
        let t = topo();
        let (_, k3b) = pair(&t, "b", 1);
        let k1 = k3b.pool().records()[0].clone();
        let (mut k3d, mut k4d) = pair(&t, "d", 2);
        k3d.install_rule(install("A1", Some("KMS_3b"), Some("KMS_4d")));
        k4d.install_rule(install("A1", Some("KMS_3d"), None));
        let k2 = k3d.pool().records()[0].clone();

        let mut ctx = Ctx::new(0, &t, 1000);
        k3d.handle(&mut ctx, &"KMS_3b".into(), ext_request(&k1));
        let (to, Message::KeyRelay(relay)) = only(&mut ctx) else { panic!() };
        assert_eq!(to.as_str(), "KMS_4d");
        assert_eq!(relay.id_key_encryption, k2.id);
        assert_eq!(
            otp_xor_octets(&relay.encrypted_relay_key, &k2.material).unwrap(),
            k1.material
        );
        assert_ne!(relay.encrypted_relay_key, k1.material);

        k4d.handle(&mut ctx, &"KMS_3d".into(), Message::KeyRelay(relay));
        let (to, Message::KeyRelayResponse(r)) = only(&mut ctx) else { panic!() };
        assert_eq!((to.as_str(), r.status), ("KMS_3d", Status::Ok));
        assert_eq!(
            k4d.delivered_material(&k1.id, &"APP_A".into(), &"APP_B".into()),
            Some(&k1.material)
        );

        k3d.handle(&mut ctx, &"KMS_4d".into(), Message::KeyRelayResponse(r));
        let (to, Message::AckRequest(ack)) = only(&mut ctx) else { panic!() };
        assert_eq!((to.as_str(), ack.ack_status), ("KMS_3b", Status::Ok));
        assert_eq!(ctx.cancels.len(), 1);
    }

    #[test]
    fn ext_key_request_with_empty_pool_acks_failure() {
        let t = topo();
        let (_, k3b) = pair(&t, "b", 1);
        let k1 = k3b.pool().records()[0].clone();
        let (mut k3d, _) = pair(&t, "d", 0);
        k3d.install_rule(install("A1", Some("KMS_3b"), Some("KMS_4d")));
        let mut ctx = Ctx::new(0, &t, 1000);
        k3d.handle(&mut ctx, &"KMS_3b".into(), ext_request(&k1));
        let (to, Message::AckRequest(ack)) = only(&mut ctx) else { panic!() };
        assert_eq!((to.as_str(), ack.ack_status), ("KMS_3b", Status::FailedNoKey));
    }

    #[test]
    fn zero_link_key_leaves_payload_in_clear() {
        let t = topo();
        let (_, k3b) = pair(&t, "b", 1);
        let k1 = k3b.pool().records()[0].clone();
        let (mut k3d, mut k4d) = pair(&t, "d", 0);
        LinkSim::new("d".into(), 1.0, 32, 1).inject(Octets::zeroed(32), &mut k3d.pool, &mut k4d.pool);
        k3d.install_rule(install("A1", Some("KMS_3b"), Some("KMS_4d")));
        let mut ctx = Ctx::new(0, &t, 1000);
        k3d.handle(&mut ctx, &"KMS_3b".into(), ext_request(&k1));
        let (_, Message::KeyRelay(relay)) = only(&mut ctx) else { panic!() };
        assert_eq!(relay.encrypted_relay_key, k1.material);
    }

    #[test]
    fn unknown_encryption_key_fails_decrypt() {
        let t = topo();
        let (_, mut k4d) = pair(&t, "d", 1);
        k4d.install_rule(install("A1", Some("KMS_3d"), None));
        let mut ctx = Ctx::new(0, &t, 1000);
        k4d.handle(
            &mut ctx,
            &"KMS_3d".into(),
            Message::KeyRelay(KeyRelay {
                encrypted_relay_key: Octets::zeroed(32),
                id_key_encryption: "nope".into(),
                id_relay_key: "k1".into(),
                app_src: "APP_A".into(),
                app_dst: "APP_B".into(),
                id_association: "A1".into(),
            }),
        );
        let (_, Message::KeyRelayResponse(r)) = only(&mut ctx) else { panic!() };
        assert_eq!(r.status, Status::FailedDecrypt);
        assert_eq!(k4d.delivered_keys().count(), 0);
    }

    #[test]
    fn orphan_completion_changes_nothing() {
        let t = topo();
        let (mut k1b, _) = pair(&t, "b", 2);
        let before = k1b.pool().counters();
        let mut ctx = Ctx::new(0, &t, 1000);
        k1b.handle(
            &mut ctx,
            &"KMS_3b".into(),
            Message::RelayProcessResponse(RelayProcessResponse {
                status: Status::Ok,
                id_relay_key: "ghost".into(),
            }),
        );
        assert!(ctx.outgoing().is_empty());
        assert_eq!(ctx.notes().len(), 1);
        assert_eq!(k1b.pool().counters(), before);
    }

    #[test]
    fn initiator_timeout_reports_failure_and_spends_key() {
        let t = topo();
        let (mut k1b, _) = pair(&t, "b", 2);
        k1b.install_rule(install("A1", None, Some("KMS_3b")));
        let mut ctx = Ctx::new(0, &t, 1000);
        k1b.handle(&mut ctx, &"vKMS_1".into(), Message::GetKey(get_key()));
        let (_, token) = ctx.pending_timers()[0];
        let mut ctx = Ctx::new(1000, &t, 1000);
        k1b.on_timer(&mut ctx, token);
        let (_, Message::KeyDelivery(d)) = only(&mut ctx) else { panic!() };
        assert_eq!(d.status, Status::FailedTimeout);
        assert_eq!(k1b.pool().counters().consumed, 1);
        // A second firing is a no-op.
        k1b.on_timer(&mut ctx, token);
        assert!(ctx.outgoing().is_empty());
    }

    #[test]
    fn delivered_keys_expire_after_ttl() {
        let t = topo();
        let (_, mut k4d) = pair(&t, "d", 0);
        k4d.set_delivered_ttl(Some(50));
        let ctx = Ctx::new(0, &t, 1000);
        k4d.store_delivered(&ctx, "k1".into(), "APP_A".into(), "APP_B".into(), Octets::zeroed(32));
        let mut ctx = Ctx::new(60, &t, 1000);
        k4d.handle(
            &mut ctx,
            &"vKMS_4".into(),
            Message::GetKeyWithId(GetKeyWithId {
                app_src: "APP_B".into(),
                app_dst: "APP_A".into(),
                key_id: "k1".into(),
            }),
        );
        let (_, Message::KeyDelivery(d)) = only(&mut ctx) else { panic!() };
        assert_eq!(d.status, Status::FailedNoKey);
    }
}
