//! Execution context handed to entity handlers.
//!
//! Entities are serial state machines: a handler consumes one message or
//! timer, and leaves its outgoing messages and timer requests in [`Ctx`]. The
//! network engine flushes them to the transport after the handler returns.

use crate::ids::EntityName;
use crate::protocol::Message;
use crate::topology::Topology;

/// Entity-local timer handle.
pub type TimerToken = u64;

pub struct Ctx<'a> {
    pub now: u64,
    pub topology: &'a Topology,
    /// Timeout applied to each request that crosses a node boundary or the control channel.
    pub timeout_ms: u64,
    pub(crate) out: Vec<(EntityName, Message)>,
    pub(crate) timers: Vec<(u64, TimerToken)>,
    pub(crate) cancels: Vec<TimerToken>,
    pub(crate) notes: Vec<String>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: u64, topology: &'a Topology, timeout_ms: u64) -> Self {
        Self {
            now,
            topology,
            timeout_ms,
            out: Vec::new(),
            timers: Vec::new(),
            cancels: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn send(&mut self, to: impl Into<EntityName>, msg: Message) {
        self.out.push((to.into(), msg));
    }

    /// Fires `token` back at the entity after the configured timeout.
    pub fn set_timeout(&mut self, token: TimerToken) {
        self.timers.push((self.now + self.timeout_ms, token));
    }

    pub fn cancel_timer(&mut self, token: TimerToken) {
        self.cancels.push(token);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn outgoing(&self) -> &[(EntityName, Message)] {
        &self.out
    }

    pub fn take_outgoing(&mut self) -> Vec<(EntityName, Message)> {
        std::mem::take(&mut self.out)
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn pending_timers(&self) -> &[(u64, TimerToken)] {
        &self.timers
    }
}
