//! Trace canonicalization and diffing.
//!
//! Key ids, association ids, key bytes and sequence numbers change with the
//! seed. Renumbering each of them by first occurrence keeps a trace's shape
//! (who sent what to whom, and which values are shared) while making runs
//! with different seeds comparable byte for byte.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;
use serde_json::Value;

use crate::protocol::{decode_trace, CodecError, Envelope, KEY_MATERIAL_FIELDS};

const KEY_ID_FIELDS: [&str; 3] = ["key_id", "id_relay_key", "id_key_encryption"];

#[derive(Default)]
struct Renumber {
    keys: HashMap<String, String>,
    assocs: HashMap<String, String>,
    octets: HashMap<String, String>,
    seqs: HashMap<(String, u64), u64>,
    next_seq: HashMap<String, u64>,
}

impl Renumber {
    fn key(&mut self, v: &str) -> String {
        let n = self.keys.len() + 1;
        self.keys.entry(v.to_owned()).or_insert_with(|| format!("key-{n}")).clone()
    }

    fn assoc(&mut self, v: &str) -> String {
        let n = self.assocs.len() + 1;
        self.assocs.entry(v.to_owned()).or_insert_with(|| format!("assoc-{n}")).clone()
    }

    /// Replaces key bytes with the occurrence counter, big-endian and
    /// zero-padded to the original length, so the result stays valid hex.
    fn octets(&mut self, v: &str) -> String {
        let n = self.octets.len() as u64 + 1;
        self.octets
            .entry(v.to_owned())
            .or_insert_with(|| {
                let len = v.len() / 2;
                let be = n.to_be_bytes();
                let mut bytes = vec![0u8; len];
                let k = len.min(be.len());
                bytes[len - k..].copy_from_slice(&be[be.len() - k..]);
                hex::encode(bytes)
            })
            .clone()
    }

    fn seq(&mut self, from: &str, seq: u64) -> u64 {
        if let Some(s) = self.seqs.get(&(from.to_owned(), seq)) {
            return *s;
        }
        let next = self.next_seq.entry(from.to_owned()).or_insert(0);
        let s = *next;
        *next += 1;
        self.seqs.insert((from.to_owned(), seq), s);
        s
    }

    fn body(&mut self, body: &mut Value) {
        let Value::Object(obj) = body else { return };
        for (k, v) in obj.iter_mut() {
            let Value::String(s) = v else { continue };
            if KEY_ID_FIELDS.contains(&k.as_str()) {
                *s = self.key(s);
            } else if k == "id_association" {
                *s = self.assoc(s);
            } else if KEY_MATERIAL_FIELDS.contains(&k.as_str()) {
                *s = self.octets(s);
            }
        }
    }
}

/// Canonical JSON value of every record, in order.
pub fn canonicalize(records: &[Envelope]) -> Vec<Value> {
    let mut r = Renumber::default();
    records
        .iter()
        .map(|env| {
            let mut v = env.to_value();
            let seq = r.seq(env.from.as_str(), env.seq);
            v["seq"] = seq.into();
            if let Some(body) = v.get_mut("body") {
                r.body(body);
            }
            v
        })
        .collect()
}

/// Canonical JSON-lines text.
pub fn canonical_trace(records: &[Envelope]) -> String {
    let mut out = String::new();
    for v in canonicalize(records) {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// First divergence between two canonical traces; empty when they match.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceDiff {
    pub index: Option<usize>,
    pub expected: Option<Value>,
    pub actual: Option<Value>,
}

impl TraceDiff {
    pub fn is_empty(&self) -> bool {
        self.index.is_none()
    }
}

impl fmt::Display for TraceDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Some(i) = self.index else {
            return write!(f, "traces match");
        };
        let show = |v: &Option<Value>| v.as_ref().map_or("<end of trace>".to_owned(), Value::to_string);
        writeln!(f, "traces diverge at record {i}")?;
        writeln!(f, "  expected: {}", show(&self.expected))?;
        write!(f, "  actual:   {}", show(&self.actual))
    }
}

pub fn diff_records(expected: &[Envelope], actual: &[Envelope]) -> TraceDiff {
    let e = canonicalize(expected);
    let a = canonicalize(actual);
    for i in 0..e.len().max(a.len()) {
        if e.get(i) != a.get(i) {
            return TraceDiff { index: Some(i), expected: e.get(i).cloned(), actual: a.get(i).cloned() };
        }
    }
    TraceDiff::default()
}

/// Parses two JSON-lines traces and compares them after canonicalization.
pub fn trace_compare(expected: &str, actual: &str) -> Result<TraceDiff, CodecError> {
    Ok(diff_records(&decode_trace(expected)?, &decode_trace(actual)?))
}
