//! Discrete-event engine wiring every entity to the transport.
//!
//! Time is simulated in integer milliseconds. Messages are delivered with zero
//! latency in global FIFO order; the clock only moves when the message queue
//! is empty and the next timer (or caller-scheduled event) is due.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::actor::{Ctx, TimerToken};
use crate::ids::{AppId, EntityName, KeyId, KmsId, LinkId, NodeId};
use crate::kms::Kms;
use crate::linksim::{KeyState, LinkSim, PoolCounters, Side};
use crate::octets::Octets;
use crate::protocol::{
    Envelope, FaultEvent, FaultRule, GetKey, GetKeyWithId, KeyDelivery, Message, Status, Transport,
};
use crate::qusec::Qusec;
use crate::topology::{Topology, WeightPolicy};
use crate::vkms::Vkms;

/// Default timeout per request hop, in simulated milliseconds.
pub const DEFAULT_TIMEOUT_MS: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub seed: u64,
    pub timeout_ms: u64,
    /// Discovery cache lifetime at every vKMS; zero disables caching.
    pub cache_ttl_ms: u64,
    /// Controller session lifetime; `None` keeps sessions forever.
    pub session_lifetime_ms: Option<u64>,
    /// Pickup lifetime of relayed keys at the target KMS; `None` keeps them forever.
    pub delivered_ttl_ms: Option<u64>,
    /// Overrides the topology's weight policy.
    pub weight_policy: Option<WeightPolicy>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            cache_ttl_ms: 0,
            session_lifetime_ms: None,
            delivered_ttl_ms: None,
            weight_policy: None,
        }
    }
}

/// What an application asked for and what it got back.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub label: Option<String>,
    pub app: AppId,
    pub target: AppId,
    pub request: &'static str,
    pub status: Status,
    pub key_id: Option<KeyId>,
    pub material: Option<Octets>,
    pub requested_at: u64,
    pub completed_at: u64,
}

#[derive(Debug, Clone)]
struct QueuedRequest {
    label: Option<String>,
    msg: Message,
    target: AppId,
    requested_at: u64,
}

/// A key-consuming application. It has one request in flight at a time and
/// only ever talks to the vKMS of its own node.
#[derive(Debug, Clone)]
pub struct App {
    id: AppId,
    vkms: EntityName,
    queue: VecDeque<QueuedRequest>,
    in_flight: Option<QueuedRequest>,
    outcomes: Vec<Outcome>,
}

impl App {
    fn new(id: AppId, node: &NodeId) -> Self {
        Self {
            id,
            vkms: EntityName::vkms(node),
            queue: VecDeque::new(),
            in_flight: None,
            outcomes: Vec::new(),
        }
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none() && self.queue.is_empty()
    }

    fn submit(&mut self, ctx: &mut Ctx<'_>, req: QueuedRequest) {
        self.queue.push_back(req);
        self.start_next(ctx);
    }

    fn start_next(&mut self, ctx: &mut Ctx<'_>) {
        if self.in_flight.is_some() {
            return;
        }
        if let Some(req) = self.queue.pop_front() {
            ctx.send(self.vkms.clone(), req.msg.clone());
            self.in_flight = Some(req);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, msg: Message) {
        match (msg, self.in_flight.take()) {
            (Message::KeyDelivery(d), Some(req)) if *from == self.vkms => {
                self.record(req, d, ctx.now);
                self.start_next(ctx);
            }
            (other, in_flight) => {
                self.in_flight = in_flight;
                ctx.note(format!("{}: unexpected {} from {from}", self.id, other.type_name()));
            }
        }
    }

    fn record(&mut self, req: QueuedRequest, d: KeyDelivery, now: u64) {
        let request = match req.msg {
            Message::GetKeyWithId(_) => "get_key_with_id",
            _ => "get_key",
        };
        self.outcomes.push(Outcome {
            label: req.label,
            app: self.id.clone(),
            target: req.target,
            request,
            status: d.status,
            key_id: d.key_id,
            material: d.material,
            requested_at: req.requested_at,
            completed_at: now,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Addr {
    App(AppId),
    Vkms(NodeId),
    Kms(KmsId),
    Qusec,
}

/// Key usage of one link, seen from both endpoint pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkUsage {
    /// Distinct keys no longer available at either end.
    pub keys_used: u64,
    pub pool_a: PoolCounters,
    pub pool_b: PoolCounters,
}

#[derive(Debug)]
pub struct Network {
    topology: Arc<Topology>,
    config: NetworkConfig,
    now: u64,
    transport: Transport,
    directory: BTreeMap<EntityName, Addr>,
    apps: BTreeMap<AppId, App>,
    vkms: BTreeMap<NodeId, Vkms>,
    kms: BTreeMap<KmsId, Kms>,
    qusec: Qusec,
    links: BTreeMap<LinkId, LinkSim>,
    timers: BinaryHeap<Reverse<(u64, u64, EntityName, TimerToken)>>,
    cancelled: HashSet<(EntityName, TimerToken)>,
    timer_seq: u64,
    notes: Vec<String>,
    delivered: u64,
}

/// SplitMix64 finalizer, used to derive independent per-component seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Network {
    pub fn new(topology: Arc<Topology>, config: NetworkConfig) -> Self {
        let policy = config.weight_policy.unwrap_or(topology.weight_policy());
        let mut directory = BTreeMap::new();
        let mut transport_dir = BTreeMap::new();

        let mut apps = BTreeMap::new();
        for (app, node) in topology.apps() {
            directory.insert(EntityName::from(app), Addr::App(app.clone()));
            transport_dir.insert(EntityName::from(app), Some(node.clone()));
            apps.insert(app.clone(), App::new(app.clone(), node));
        }
        let mut vkms = BTreeMap::new();
        for node in topology.nodes() {
            let v = Vkms::new(node.id.clone(), config.cache_ttl_ms);
            directory.insert(v.name().clone(), Addr::Vkms(node.id.clone()));
            transport_dir.insert(v.name().clone(), Some(node.id.clone()));
            vkms.insert(node.id.clone(), v);
        }
        let mut kms = BTreeMap::new();
        let mut links = BTreeMap::new();
        for (i, link) in topology.links().iter().enumerate() {
            let ka = KmsId::render(&link.a, &link.id);
            let kb = KmsId::render(&link.b, &link.id);
            let mut a = Kms::new(ka.clone(), link.a.clone(), link.id.clone(), kb.clone(), Side::A);
            let mut b = Kms::new(kb.clone(), link.b.clone(), link.id.clone(), ka.clone(), Side::B);
            a.set_delivered_ttl(config.delivered_ttl_ms);
            b.set_delivered_ttl(config.delivered_ttl_ms);
            let mut sim = LinkSim::new(
                link.id.clone(),
                link.key_rate,
                topology.key_size(),
                mix(config.seed, i as u64 + 1),
            );
            sim.generate_keys(link.initial_pool, a.pool_mut(), b.pool_mut());
            for (id, k, node) in [(ka, a, &link.a), (kb, b, &link.b)] {
                directory.insert(EntityName::from(&id), Addr::Kms(id.clone()));
                transport_dir.insert(EntityName::from(&id), Some(node.clone()));
                kms.insert(id, k);
            }
            links.insert(link.id.clone(), sim);
        }
        directory.insert(EntityName::qusec(), Addr::Qusec);
        transport_dir.insert(EntityName::qusec(), None);

        let qusec = Qusec::new(policy, config.session_lifetime_ms, mix(config.seed, 0));
        Self {
            topology,
            config,
            now: 0,
            transport: Transport::new(transport_dir),
            directory,
            apps,
            vkms,
            kms,
            qusec,
            links,
            timers: BinaryHeap::new(),
            cancelled: HashSet::new(),
            timer_seq: 0,
            notes: Vec::new(),
            delivered: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn kms(&self, id: &KmsId) -> Option<&Kms> {
        self.kms.get(id)
    }

    pub fn kms_mut(&mut self, id: &KmsId) -> Option<&mut Kms> {
        self.kms.get_mut(id)
    }

    pub fn all_kms(&self) -> impl Iterator<Item = &Kms> {
        self.kms.values()
    }

    pub fn vkms(&self, node: &NodeId) -> Option<&Vkms> {
        self.vkms.get(node)
    }

    pub fn qusec(&self) -> &Qusec {
        &self.qusec
    }

    pub fn app(&self, id: &AppId) -> Option<&App> {
        self.apps.get(id)
    }

    /// Every outcome of every application, in completion order.
    pub fn outcomes(&self) -> Vec<Outcome> {
        let mut all: Vec<Outcome> = self.apps.values().flat_map(|a| a.outcomes().iter().cloned()).collect();
        all.sort_by_key(|o| o.completed_at);
        all
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn faults(&self) -> &[FaultEvent] {
        self.transport.faults()
    }

    /// Delivered messages so far, in delivery order.
    pub fn trace(&self) -> &[Envelope] {
        self.transport.log()
    }

    pub fn drain_trace(&mut self) -> Vec<Envelope> {
        self.transport.drain()
    }

    pub fn arm_fault(&mut self, rule: FaultRule) {
        self.transport.arm(rule);
    }

    pub fn link_usage(&self, link: &LinkId) -> Option<LinkUsage> {
        let l = self.topology.link(link)?;
        let a = &self.kms[&KmsId::render(&l.a, &l.id)];
        let b = &self.kms[&KmsId::render(&l.b, &l.id)];
        let mut used: HashSet<&KeyId> = HashSet::new();
        for pool in [a.pool(), b.pool()] {
            used.extend(
                pool.records()
                    .iter()
                    .filter(|r| r.state != KeyState::Available)
                    .map(|r| &r.id),
            );
        }
        Some(LinkUsage {
            keys_used: used.len() as u64,
            pool_a: a.pool().counters(),
            pool_b: b.pool().counters(),
        })
    }

    /// Sum of [`LinkUsage::keys_used`] over all links.
    pub fn total_keys_used(&self) -> u64 {
        self.topology
            .links()
            .iter()
            .filter_map(|l| self.link_usage(&l.id))
            .map(|u| u.keys_used)
            .sum()
    }

    /// Queues a `Get Key` from `app` toward `target`.
    pub fn request_key(&mut self, app: &AppId, target: &AppId, label: Option<String>) -> bool {
        let msg = Message::GetKey(GetKey { app_src: app.clone(), app_dst: target.clone() });
        self.submit(app, target, msg, label)
    }

    /// Queues a `Get Key with ID` from `app` for a key shared by `target`.
    pub fn request_key_with_id(&mut self, app: &AppId, target: &AppId, key_id: KeyId, label: Option<String>) -> bool {
        let msg = Message::GetKeyWithId(GetKeyWithId {
            app_src: app.clone(),
            app_dst: target.clone(),
            key_id,
        });
        self.submit(app, target, msg, label)
    }

    fn submit(&mut self, app: &AppId, target: &AppId, msg: Message, label: Option<String>) -> bool {
        let topology = Arc::clone(&self.topology);
        let mut ctx = Ctx::new(self.now, &topology, self.config.timeout_ms);
        let Some(a) = self.apps.get_mut(app) else {
            return false;
        };
        a.submit(
            &mut ctx,
            QueuedRequest { label, msg, target: target.clone(), requested_at: self.now },
        );
        self.flush(&EntityName::from(app), ctx);
        true
    }

    /// Advances key generation on one link (or all links) by `dt_ms`.
    pub fn tick_links(&mut self, dt_ms: u64, only: Option<&LinkId>) -> u64 {
        let dt = dt_ms as f64 / 1000.0;
        let mut total = 0;
        for link in self.topology.links() {
            if only.is_some_and(|o| o != &link.id) {
                continue;
            }
            let ka = KmsId::render(&link.a, &link.id);
            let kb = KmsId::render(&link.b, &link.id);
            let mut a = self.kms.remove(&ka).expect("kms exists");
            let b = self.kms.get_mut(&kb).expect("kms exists");
            let sim = self.links.get_mut(&link.id).expect("link sim exists");
            total += sim.tick(dt, a.pool_mut(), b.pool_mut());
            self.kms.insert(ka, a);
        }
        total
    }

    /// Appends one key with chosen material to both ends of `link`.
    pub fn inject_key(&mut self, link: &LinkId, material: Octets) -> Option<KeyId> {
        let l = self.topology.link(link)?.clone();
        let ka = KmsId::render(&l.a, &l.id);
        let kb = KmsId::render(&l.b, &l.id);
        let mut a = self.kms.remove(&ka)?;
        let b = self.kms.get_mut(&kb)?;
        let id = self.links.get_mut(link)?.inject(material, a.pool_mut(), b.pool_mut());
        self.kms.insert(ka, a);
        Some(id)
    }

    /// Marks controller sessions past their lifetime as expired.
    pub fn session_gc(&mut self) -> usize {
        self.qusec.session_gc(self.now)
    }

    fn flush(&mut self, from: &EntityName, ctx: Ctx<'_>) {
        let Ctx { out, timers, cancels, notes, .. } = ctx;
        for (to, msg) in out {
            if let Err(e) = self.transport.send(from, &to, msg) {
                self.notes.push(format!("{from}: send failed: {e}"));
            }
        }
        for (deadline, token) in timers {
            self.timer_seq += 1;
            self.timers.push(Reverse((deadline, self.timer_seq, from.clone(), token)));
        }
        for token in cancels {
            self.cancelled.insert((from.clone(), token));
        }
        self.notes.extend(notes);
    }

    fn dispatch(&mut self, env: Envelope) {
        let topology = Arc::clone(&self.topology);
        let mut ctx = Ctx::new(self.now, &topology, self.config.timeout_ms);
        match self.directory.get(&env.to) {
            Some(Addr::App(id)) => self.apps.get_mut(id).expect("app").handle(&mut ctx, &env.from, env.msg),
            Some(Addr::Vkms(n)) => self.vkms.get_mut(n).expect("vkms").handle(&mut ctx, &env.from, env.msg),
            Some(Addr::Kms(k)) => self.kms.get_mut(k).expect("kms").handle(&mut ctx, &env.from, env.msg),
            Some(Addr::Qusec) => self.qusec.handle(&mut ctx, &env.from, env.msg),
            None => ctx.note(format!("message to unknown entity {}", env.to)),
        }
        self.flush(&env.to, ctx);
    }

    fn fire(&mut self, entity: EntityName, token: TimerToken) {
        let topology = Arc::clone(&self.topology);
        let mut ctx = Ctx::new(self.now, &topology, self.config.timeout_ms);
        match self.directory.get(&entity) {
            Some(Addr::Vkms(n)) => self.vkms.get_mut(n).expect("vkms").on_timer(&mut ctx, token),
            Some(Addr::Kms(k)) => self.kms.get_mut(k).expect("kms").on_timer(&mut ctx, token),
            _ => {}
        }
        self.flush(&entity, ctx);
    }

    /// Delivers one message, or fires one timer due at or before `until`.
    /// Returns false when nothing is left to do before `until`.
    pub fn step(&mut self, until: u64) -> bool {
        if let Some(env) = self.transport.pop() {
            self.delivered += 1;
            self.dispatch(env);
            return true;
        }
        while let Some(Reverse((deadline, _, entity, token))) = self.timers.peek().cloned() {
            if deadline > until {
                return false;
            }
            self.timers.pop();
            if self.cancelled.remove(&(entity.clone(), token)) {
                continue;
            }
            self.now = self.now.max(deadline);
            self.fire(entity, token);
            return true;
        }
        false
    }

    /// Runs every message and timer due up to `t`, then sets the clock to `t`.
    /// Returns false if `budget` steps were exhausted first.
    pub fn run_until(&mut self, t: u64, budget: u64) -> bool {
        let mut steps = 0;
        while self.step(t) {
            steps += 1;
            if steps >= budget {
                return false;
            }
        }
        self.now = self.now.max(t);
        true
    }

    /// Runs until no message or live timer remains.
    pub fn run_to_quiescence(&mut self, budget: u64) -> bool {
        let mut steps = 0;
        while self.step(u64::MAX) {
            steps += 1;
            if steps >= budget {
                return false;
            }
        }
        true
    }

    /// Messages delivered so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// True when nothing is queued and no entity is waiting on a reply.
    pub fn is_quiescent(&self) -> bool {
        self.transport.pending() == 0
            && self.apps.values().all(App::is_idle)
            && self.vkms.values().all(Vkms::is_idle)
            && self.kms.values().all(|k| k.pending_count() == 0)
    }
}
