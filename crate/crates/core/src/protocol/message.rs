//! The protocol message set and its JSON wire codec.
//!
//! Every message travels inside an envelope
//! `{seq, from, to, channel, type, body}` serialized as canonical JSON:
//! object keys sorted, octets as lowercase hex.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ids::{AppId, AssociationId, EntityName, KeyId, KmsId};
use crate::octets::Octets;

/// Outcome carried by responses. Failures travel back along the relay chain unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    FailedNoKey,
    FailedNoRule,
    FailedDecrypt,
    FailedTimeout,
    FailedUnknownApp,
}

impl Status {
    pub fn is_ok(self) -> bool {
        self == Status::Ok
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::FailedNoKey => "failed_no_key",
            Status::FailedNoRule => "failed_no_rule",
            Status::FailedDecrypt => "failed_decrypt",
            Status::FailedTimeout => "failed_timeout",
            Status::FailedUnknownApp => "failed_unknown_app",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque extension parameters of the inter-KMS relay messages. Empty by default.
pub type Ext = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetKey {
    pub app_src: AppId,
    pub app_dst: AppId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetKeyWithId {
    pub app_src: AppId,
    pub app_dst: AppId,
    pub key_id: KeyId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmsDiscoveryRequest {
    pub app_src: AppId,
    pub app_dst: AppId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmsDiscoveryResponse {
    pub app_src: AppId,
    pub app_dst: AppId,
    /// `None` when discovery failed; `status` says why.
    pub id_kms: Option<KmsId>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayPathInstall {
    pub id_association: AssociationId,
    pub prev_hop: Option<KmsId>,
    pub next_hop: Option<KmsId>,
    pub app_src: AppId,
    pub app_dst: AppId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayProcessRequest {
    pub app_src: AppId,
    pub app_dst: AppId,
    pub id_relay_key: KeyId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtKeyRequest {
    pub id_relay_key: KeyId,
    pub value_relay_key: Octets,
    pub app_src: AppId,
    pub app_dst: AppId,
    pub id_association: AssociationId,
    #[serde(default)]
    pub ext: Ext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRelay {
    pub encrypted_relay_key: Octets,
    pub id_key_encryption: KeyId,
    pub id_relay_key: KeyId,
    pub app_src: AppId,
    pub app_dst: AppId,
    pub id_association: AssociationId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRelayResponse {
    pub status: Status,
    pub id_relay_key: KeyId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckRequest {
    pub id_relay_key: KeyId,
    pub ack_status: Status,
    pub app_src: AppId,
    pub app_dst: AppId,
    #[serde(default)]
    pub ext: Ext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayProcessResponse {
    pub status: Status,
    pub id_relay_key: KeyId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyDelivery {
    pub key_id: Option<KeyId>,
    pub material: Option<Octets>,
    pub status: Status,
}

impl KeyDelivery {
    pub fn ok(key_id: KeyId, material: Octets) -> Self {
        Self { key_id: Some(key_id), material: Some(material), status: Status::Ok }
    }

    pub fn failed(status: Status) -> Self {
        Self { key_id: None, material: None, status }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum Message {
    GetKey(GetKey),
    GetKeyWithId(GetKeyWithId),
    KmsDiscoveryRequest(KmsDiscoveryRequest),
    KmsDiscoveryResponse(KmsDiscoveryResponse),
    RelayPathInstall(RelayPathInstall),
    RelayProcessRequest(RelayProcessRequest),
    ExtKeyRequest(ExtKeyRequest),
    KeyRelay(KeyRelay),
    KeyRelayResponse(KeyRelayResponse),
    AckRequest(AckRequest),
    RelayProcessResponse(RelayProcessResponse),
    KeyDelivery(KeyDelivery),
}

/// Wire names of every message type.
pub const MESSAGE_TYPES: [&str; 12] = [
    "GetKey",
    "GetKeyWithId",
    "KmsDiscoveryRequest",
    "KmsDiscoveryResponse",
    "RelayPathInstall",
    "RelayProcessRequest",
    "ExtKeyRequest",
    "KeyRelay",
    "KeyRelayResponse",
    "AckRequest",
    "RelayProcessResponse",
    "KeyDelivery",
];

/// Body fields that carry key bytes, plaintext or encrypted.
pub const KEY_MATERIAL_FIELDS: [&str; 3] = ["material", "value_relay_key", "encrypted_relay_key"];

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::GetKey(_) => "GetKey",
            Message::GetKeyWithId(_) => "GetKeyWithId",
            Message::KmsDiscoveryRequest(_) => "KmsDiscoveryRequest",
            Message::KmsDiscoveryResponse(_) => "KmsDiscoveryResponse",
            Message::RelayPathInstall(_) => "RelayPathInstall",
            Message::RelayProcessRequest(_) => "RelayProcessRequest",
            Message::ExtKeyRequest(_) => "ExtKeyRequest",
            Message::KeyRelay(_) => "KeyRelay",
            Message::KeyRelayResponse(_) => "KeyRelayResponse",
            Message::AckRequest(_) => "AckRequest",
            Message::RelayProcessResponse(_) => "RelayProcessResponse",
            Message::KeyDelivery(_) => "KeyDelivery",
        }
    }

    /// Key bytes carried by this message, if any.
    pub fn key_octets(&self) -> Option<&Octets> {
        match self {
            Message::ExtKeyRequest(m) => Some(&m.value_relay_key),
            Message::KeyRelay(m) => Some(&m.encrypted_relay_key),
            Message::KeyDelivery(m) => m.material.as_ref(),
            _ => None,
        }
    }

    pub fn key_octets_mut(&mut self) -> Option<&mut Octets> {
        match self {
            Message::ExtKeyRequest(m) => Some(&mut m.value_relay_key),
            Message::KeyRelay(m) => Some(&mut m.encrypted_relay_key),
            Message::KeyDelivery(m) => m.material.as_mut(),
            _ => None,
        }
    }

    /// Plaintext key bytes: everything except the OTP-encrypted relay payload.
    pub fn carries_plaintext_key(&self) -> bool {
        match self {
            Message::ExtKeyRequest(_) => true,
            Message::KeyDelivery(m) => m.material.is_some(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Between entities inside one physically secure node.
    IntraNode,
    /// Between KMSs at the two ends of a QKD link.
    InterNode,
    /// To or from the controller.
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    /// Per-sender sequence number.
    pub seq: u64,
    pub from: EntityName,
    pub to: EntityName,
    pub channel: Channel,
    pub msg: Message,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("codec error at `{field}`: {reason}")]
pub struct CodecError {
    pub field: String,
    pub reason: String,
}

impl CodecError {
    fn new(field: &str, reason: impl fmt::Display) -> Self {
        Self { field: field.to_owned(), reason: reason.to_string() }
    }
}

const ENVELOPE_KEYS: [&str; 6] = ["body", "channel", "from", "seq", "to", "type"];

impl Envelope {
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.msg).expect("messages serialize");
        let obj = v.as_object_mut().expect("adjacently tagged enum is an object");
        obj.insert("seq".into(), self.seq.into());
        obj.insert("from".into(), self.from.as_str().into());
        obj.insert("to".into(), self.to.as_str().into());
        obj.insert(
            "channel".into(),
            serde_json::to_value(self.channel).expect("channel serializes"),
        );
        v
    }

    /// Canonical JSON text (sorted keys, no whitespace).
    pub fn encode(&self) -> String {
        self.to_value().to_string()
    }

    pub fn decode(text: &str) -> Result<Self, CodecError> {
        let v: Value = serde_json::from_str(text).map_err(|e| CodecError::new("envelope", e))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self, CodecError> {
        let Value::Object(mut obj) = v else {
            return Err(CodecError::new("envelope", "not a JSON object"));
        };
        if let Some(extra) = obj.keys().find(|k| !ENVELOPE_KEYS.contains(&k.as_str())) {
            return Err(CodecError::new(extra, "unknown envelope field"));
        }
        let seq = obj
            .get("seq")
            .and_then(Value::as_u64)
            .ok_or_else(|| CodecError::new("seq", "missing or not an unsigned integer"))?;
        let name = |obj: &serde_json::Map<String, Value>, key: &str| {
            obj.get(key)
                .and_then(Value::as_str)
                .map(EntityName::from)
                .ok_or_else(|| CodecError::new(key, "missing or not a string"))
        };
        let from = name(&obj, "from")?;
        let to = name(&obj, "to")?;
        let channel: Channel = obj
            .get("channel")
            .cloned()
            .ok_or_else(|| CodecError::new("channel", "missing"))
            .and_then(|c| serde_json::from_value(c).map_err(|e| CodecError::new("channel", e)))?;
        let ty = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| CodecError::new("type", "missing or not a string"))?;
        if !MESSAGE_TYPES.contains(&ty) {
            return Err(CodecError::new("type", format!("unknown message type {ty:?}")));
        }
        let ty = ty.to_owned();
        let body = obj.remove("body").ok_or_else(|| CodecError::new("body", "missing"))?;
        let msg: Message =
            serde_json::from_value(serde_json::json!({ "type": ty, "body": body }))
                .map_err(|e| CodecError::new(&format!("body ({ty})"), e))?;
        Ok(Envelope { seq, from, to, channel, msg })
    }
}

/// Serializes a trace as JSON lines, one envelope per line.
pub fn encode_trace(records: &[Envelope]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.encode());
        out.push('\n');
    }
    out
}

pub fn decode_trace(text: &str) -> Result<Vec<Envelope>, CodecError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Envelope::decode)
        .collect()
}
