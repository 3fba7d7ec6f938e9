//! Scenario file format.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::ids::{AppId, KeyId, LinkId};

/// Network settings a scenario may fix. CLI flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub timeout_ms: Option<u64>,
    pub cache_ttl_ms: Option<u64>,
    pub session_lifetime_ms: Option<u64>,
    pub delivered_ttl_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    GetKey {
        #[serde(default)]
        at: u64,
        app: AppId,
        target: AppId,
        label: Option<String>,
    },
    /// Asks for a key the target already holds. The id comes either from an
    /// earlier labelled request (`key_of`) or literally (`key_id`).
    GetKeyWithId {
        #[serde(default)]
        at: u64,
        app: AppId,
        target: AppId,
        key_of: Option<String>,
        key_id: Option<KeyId>,
        label: Option<String>,
    },
    TickLinks {
        #[serde(default)]
        at: u64,
        dt_ms: u64,
        link: Option<LinkId>,
    },
    DropMessage {
        #[serde(default)]
        at: u64,
        nth: u64,
        msg_type: Option<String>,
    },
    CorruptMessage {
        #[serde(default)]
        at: u64,
        nth: u64,
        msg_type: Option<String>,
    },
    AdvanceClock {
        #[serde(default)]
        at: u64,
        ms: u64,
    },
}

impl Event {
    pub fn at(&self) -> u64 {
        match self {
            Event::GetKey { at, .. }
            | Event::GetKeyWithId { at, .. }
            | Event::TickLinks { at, .. }
            | Event::DropMessage { at, .. }
            | Event::CorruptMessage { at, .. }
            | Event::AdvanceClock { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Golden trace, relative to the scenario file.
    pub trace: Option<String>,
    /// Final status per request label; `not_run` for skipped requests.
    #[serde(default)]
    pub statuses: BTreeMap<String, String>,
    /// Label pairs whose delivered key material must be byte-equal.
    #[serde(default)]
    pub keys_equal: Vec<[String; 2]>,
    /// Label pairs that both succeeded but must hold different material.
    #[serde(default)]
    pub keys_differ: Vec<[String; 2]>,
    /// Keys used per link, counted over both endpoint pools.
    #[serde(default)]
    pub pool_consumed: BTreeMap<LinkId, u64>,
    pub total_keys_used: Option<u64>,
    /// Delivered messages per type.
    #[serde(default)]
    pub message_counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub description: Option<String>,
    /// Topology file, relative to the scenario file; used when none is given.
    pub topology: Option<String>,
    #[serde(default)]
    pub config: ScenarioConfig,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub expect: Expectations,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), String> {
        if let Some(w) = self.events.windows(2).find(|w| w[1].at() < w[0].at()) {
            return Err(format!("events out of time order: {} after {}", w[1].at(), w[0].at()));
        }
        for e in &self.events {
            match e {
                Event::GetKeyWithId { key_of, key_id, .. } if key_of.is_some() == key_id.is_some() => {
                    return Err("get_key_with_id needs exactly one of key_of and key_id".into());
                }
                Event::DropMessage { nth: 0, .. } | Event::CorruptMessage { nth: 0, .. } => {
                    return Err("fault nth counts from 1".into());
                }
                _ => {}
            }
        }
        let mut labels = std::collections::BTreeSet::new();
        for e in &self.events {
            if let Event::GetKey { label: Some(l), .. } | Event::GetKeyWithId { label: Some(l), .. } = e {
                if !labels.insert(l.as_str()) {
                    return Err(format!("duplicate label {l}"));
                }
            }
        }
        Ok(())
    }
}
