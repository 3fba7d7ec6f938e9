//! Per-node virtual KMS: the only entity applications talk to.
//!
//! Requests are processed one at a time. For each one the vKMS asks the
//! controller which local KMS serves the application pair (or reuses a cached
//! answer), forwards the request there and relays the `KeyDelivery` back.

use std::collections::{HashMap, VecDeque};

use crate::actor::{Ctx, TimerToken};
use crate::ids::{AppId, EntityName, KmsId, NodeId};
use crate::protocol::{
    GetKey, GetKeyWithId, KeyDelivery, KmsDiscoveryRequest, KmsDiscoveryResponse, Message, Status,
};

/// An application request as received by the vKMS.
#[derive(Debug, Clone, PartialEq)]
pub enum AppRequest {
    GetKey(GetKey),
    GetKeyWithId(GetKeyWithId),
}

impl AppRequest {
    pub fn apps(&self) -> (&AppId, &AppId) {
        match self {
            AppRequest::GetKey(m) => (&m.app_src, &m.app_dst),
            AppRequest::GetKeyWithId(m) => (&m.app_src, &m.app_dst),
        }
    }

    fn kind(&self) -> RequestKind {
        match self {
            AppRequest::GetKey(_) => RequestKind::GetKey,
            AppRequest::GetKeyWithId(_) => RequestKind::GetKeyWithId,
        }
    }

    fn into_message(self) -> Message {
        match self {
            AppRequest::GetKey(m) => Message::GetKey(m),
            AppRequest::GetKeyWithId(m) => Message::GetKeyWithId(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RequestKind {
    GetKey,
    GetKeyWithId,
}

type CacheKey = (RequestKind, AppId, AppId);

/// TTL-bounded memo of discovery answers. A TTL of zero disables it.
#[derive(Debug, Clone, Default)]
pub struct DiscoveryCache {
    ttl_ms: u64,
    entries: HashMap<CacheKey, (KmsId, u64)>,
}

impl DiscoveryCache {
    pub fn new(ttl_ms: u64) -> Self {
        Self { ttl_ms, entries: HashMap::new() }
    }

    pub fn enabled(&self) -> bool {
        self.ttl_ms > 0
    }

    fn lookup(&mut self, key: &CacheKey, now: u64) -> Option<KmsId> {
        self.expire(now);
        self.entries.get(key).map(|(k, _)| k.clone())
    }

    fn insert(&mut self, key: CacheKey, kms: KmsId, now: u64) {
        if self.enabled() {
            self.entries.insert(key, (kms, now + self.ttl_ms));
        }
    }

    /// Drops entries whose lifetime has elapsed. Returns how many were removed.
    pub fn expire(&mut self, now: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, (_, expiry)| now < *expiry);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn kms_ids(&self) -> impl Iterator<Item = &KmsId> {
        self.entries.values().map(|(k, _)| k)
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Discovering { timer: TimerToken },
    AwaitingKms { kms: KmsId },
}

#[derive(Debug, Clone)]
struct InFlight {
    app: EntityName,
    request: AppRequest,
    stage: Stage,
}

#[derive(Debug, Clone)]
pub struct Vkms {
    node: NodeId,
    name: EntityName,
    cache: DiscoveryCache,
    queue: VecDeque<(EntityName, AppRequest)>,
    in_flight: Option<InFlight>,
    next_token: TimerToken,
    requests: u64,
    discoveries: u64,
}

impl Vkms {
    pub fn new(node: NodeId, cache_ttl_ms: u64) -> Self {
        Self {
            name: EntityName::vkms(&node),
            node,
            cache: DiscoveryCache::new(cache_ttl_ms),
            queue: VecDeque::new(),
            in_flight: None,
            next_token: 0,
            requests: 0,
            discoveries: 0,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn name(&self) -> &EntityName {
        &self.name
    }

    pub fn cache(&self) -> &DiscoveryCache {
        &self.cache
    }

    /// Accepted application requests; the hook for per-node usage policies.
    pub fn request_count(&self) -> u64 {
        self.requests
    }

    pub fn discovery_count(&self) -> u64 {
        self.discoveries
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none() && self.queue.is_empty()
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, msg: Message) {
        match msg {
            Message::GetKey(m) => self.handle_app_request(ctx, from, AppRequest::GetKey(m)),
            Message::GetKeyWithId(m) => {
                self.handle_app_request(ctx, from, AppRequest::GetKeyWithId(m))
            }
            Message::KmsDiscoveryResponse(m) if from.is_qusec() => self.on_discovery(ctx, m),
            Message::KeyDelivery(m) => self.on_delivery(ctx, from, m),
            other => ctx.note(format!(
                "{}: unexpected {} from {from}",
                self.name,
                other.type_name()
            )),
        }
    }

    pub fn handle_app_request(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, request: AppRequest) {
        let (src, _) = request.apps();
        let registered_here = ctx.topology.apps().get(src) == Some(&self.node);
        if !registered_here || from.as_str() != src.as_str() {
            ctx.send(from.clone(), Message::KeyDelivery(KeyDelivery::failed(Status::FailedUnknownApp)));
            return;
        }
        self.requests += 1;
        self.queue.push_back((from.clone(), request));
        self.start_next(ctx);
    }

    fn start_next(&mut self, ctx: &mut Ctx<'_>) {
        if self.in_flight.is_some() {
            return;
        }
        let Some((app, request)) = self.queue.pop_front() else {
            return;
        };
        let (src, dst) = request.apps();
        let key = (request.kind(), src.clone(), dst.clone());
        if let Some(kms) = self.cache.lookup(&key, ctx.now) {
            self.forward(ctx, app, request, kms);
            return;
        }
        let discovery = KmsDiscoveryRequest { app_src: src.clone(), app_dst: dst.clone() };
        let timer = self.next_token;
        self.next_token += 1;
        ctx.set_timeout(timer);
        self.discoveries += 1;
        ctx.send(EntityName::qusec(), Message::KmsDiscoveryRequest(discovery));
        self.in_flight = Some(InFlight { app, request, stage: Stage::Discovering { timer } });
    }

    fn forward(&mut self, ctx: &mut Ctx<'_>, app: EntityName, request: AppRequest, kms: KmsId) {
        ctx.send(kms.clone(), request.clone().into_message());
        self.in_flight = Some(InFlight { app, request, stage: Stage::AwaitingKms { kms } });
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>, delivery: KeyDelivery) {
        if let Some(done) = self.in_flight.take() {
            ctx.send(done.app, Message::KeyDelivery(delivery));
        }
        self.start_next(ctx);
    }

    fn on_discovery(&mut self, ctx: &mut Ctx<'_>, m: KmsDiscoveryResponse) {
        let Some(InFlight { stage: Stage::Discovering { timer }, request, .. }) = &self.in_flight
        else {
            ctx.note(format!("{}: unsolicited KmsDiscoveryResponse", self.name));
            return;
        };
        if request.apps() != (&m.app_src, &m.app_dst) {
            ctx.note(format!("{}: KmsDiscoveryResponse for another pair", self.name));
            return;
        }
        ctx.cancel_timer(*timer);
        let kms = match (m.status, m.id_kms) {
            (Status::Ok, Some(kms)) => kms,
            (Status::Ok, None) => return self.finish(ctx, KeyDelivery::failed(Status::FailedNoRule)),
            (status, _) => return self.finish(ctx, KeyDelivery::failed(status)),
        };
        // Only ever forward to, or cache, a KMS on this node.
        if ctx.topology.kms_endpoint(&kms).map(|(n, _)| n) != Some(&self.node) {
            return self.finish(ctx, KeyDelivery::failed(Status::FailedNoRule));
        }
        let InFlight { app, request, .. } = self.in_flight.take().expect("checked above");
        let key = (request.kind(), m.app_src, m.app_dst);
        self.cache.insert(key, kms.clone(), ctx.now);
        self.forward(ctx, app, request, kms);
    }

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, from: &EntityName, m: KeyDelivery) {
        match &self.in_flight {
            Some(InFlight { stage: Stage::AwaitingKms { kms }, .. }) if kms.as_str() == from.as_str() => {
                self.finish(ctx, m)
            }
            _ => ctx.note(format!("{}: dropped orphan KeyDelivery from {from}", self.name)),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: TimerToken) {
        if matches!(
            &self.in_flight,
            Some(InFlight { stage: Stage::Discovering { timer }, .. }) if *timer == token
        ) {
            self.finish(ctx, KeyDelivery::failed(Status::FailedTimeout));
        }
    }

    /// True when every cached KMS is local to this node.
    pub fn cache_is_local(&self, topology: &crate::topology::Topology) -> bool {
        self.cache
            .kms_ids()
            .all(|k| topology.kms_endpoint(k).map(|(n, _)| n) == Some(&self.node))
    }
}
