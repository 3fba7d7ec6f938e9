//! Instrumented in-memory transport.
//!
//! One global FIFO queue carries every message, which makes each
//! `(sender, receiver)` channel FIFO and delivery order reproducible. The
//! sender address is stamped by the transport itself, so entities cannot
//! spoof each other. Fault rules can drop or corrupt selected messages.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EntityName, NodeId};
use crate::protocol::message::{Channel, Envelope, Message};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("unknown entity {0}")]
    UnknownEntity(EntityName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Drop,
    /// Flips every bit of the first key byte carried by the message.
    Corrupt,
}

/// Selects the `nth` (1-based) message sent after the rule is armed,
/// optionally counting only messages of one type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub action: FaultAction,
    pub nth: u64,
    #[serde(default)]
    pub msg_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultEvent {
    pub action: FaultAction,
    pub from: EntityName,
    pub to: EntityName,
    pub seq: u64,
    #[serde(rename = "type")]
    pub msg_type: &'static str,
    /// False when a corrupt rule hit a message without key bytes.
    pub applied: bool,
}

#[derive(Debug)]
struct ArmedRule {
    rule: FaultRule,
    seen: u64,
}

#[derive(Debug)]
pub struct Transport {
    /// Every addressable entity and the node hosting it (`None` for the controller).
    directory: BTreeMap<EntityName, Option<NodeId>>,
    next_seq: HashMap<EntityName, u64>,
    queue: VecDeque<Envelope>,
    log: Vec<Envelope>,
    rules: Vec<ArmedRule>,
    faults: Vec<FaultEvent>,
}

impl Transport {
    pub fn new(directory: BTreeMap<EntityName, Option<NodeId>>) -> Self {
        Self {
            directory,
            next_seq: HashMap::new(),
            queue: VecDeque::new(),
            log: Vec::new(),
            rules: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn knows(&self, name: &EntityName) -> bool {
        self.directory.contains_key(name)
    }

    pub fn channel_between(&self, from: &EntityName, to: &EntityName) -> Result<Channel, TransportError> {
        let a = self
            .directory
            .get(from)
            .ok_or_else(|| TransportError::UnknownEntity(from.clone()))?;
        let b = self
            .directory
            .get(to)
            .ok_or_else(|| TransportError::UnknownEntity(to.clone()))?;
        Ok(match (a, b) {
            (None, _) | (_, None) => Channel::Control,
            (Some(x), Some(y)) if x == y => Channel::IntraNode,
            _ => Channel::InterNode,
        })
    }

    pub fn arm(&mut self, rule: FaultRule) {
        self.rules.push(ArmedRule { rule, seen: 0 });
    }

    /// Queues `msg` from `from` to `to`, applying any armed fault rule.
    pub fn send(&mut self, from: &EntityName, to: &EntityName, msg: Message) -> Result<(), TransportError> {
        let channel = self.channel_between(from, to)?;
        let seq = {
            let next = self.next_seq.entry(from.clone()).or_insert(0);
            let s = *next;
            *next += 1;
            s
        };
        let mut env = Envelope { seq, from: from.clone(), to: to.clone(), channel, msg };

        let mut fired = Vec::new();
        for (i, armed) in self.rules.iter_mut().enumerate() {
            let matches = armed
                .rule
                .msg_type
                .as_deref()
                .is_none_or(|t| t == env.msg.type_name());
            if matches {
                armed.seen += 1;
                if armed.seen == armed.rule.nth {
                    fired.push(i);
                }
            }
        }
        let mut dropped = false;
        for &i in fired.iter().rev() {
            let rule = self.rules.remove(i).rule;
            let applied = match rule.action {
                FaultAction::Drop => {
                    dropped = true;
                    true
                }
                FaultAction::Corrupt => match env.msg.key_octets_mut() {
                    Some(o) if !o.is_empty() => {
                        o.as_bytes_mut()[0] ^= 0xFF;
                        true
                    }
                    _ => false,
                },
            };
            self.faults.push(FaultEvent {
                action: rule.action,
                from: env.from.clone(),
                to: env.to.clone(),
                seq,
                msg_type: env.msg.type_name(),
                applied,
            });
        }
        if !dropped {
            self.queue.push_back(env);
        }
        Ok(())
    }

    /// Next message in delivery order. Delivered messages are appended to the log.
    pub fn pop(&mut self) -> Option<Envelope> {
        let env = self.queue.pop_front()?;
        self.log.push(env.clone());
        Some(env)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    /// Returns and clears the delivery log.
    pub fn drain(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.log)
    }

    pub fn faults(&self) -> &[FaultEvent] {
        &self.faults
    }
}
