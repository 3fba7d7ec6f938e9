//! Simulated QKD links.
//!
//! A link is a seeded generator that appends identical key records to the
//! two pools held by its endpoint KMSs. The pools are owned by the KMSs; this
//! module only ever appends to them.

use std::collections::{HashMap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::ids::{KeyId, LinkId};
use crate::octets::Octets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyState {
    Available,
    Reserved,
    Consumed,
}

/// Which end of a link a pool sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyRecord {
    pub id: KeyId,
    pub material: Octets,
    pub state: KeyState,
    /// Position in the link's generation sequence.
    pub index: u64,
}

impl KeyRecord {
    /// Side allowed to pick this key with [`KeyPool::reserve_next`].
    ///
    /// Even generation indices belong to endpoint `a`, odd ones to `b`, so the
    /// two ends never hand out the same key to unrelated requests.
    pub fn owner(&self) -> Side {
        if self.index.is_multiple_of(2) {
            Side::A
        } else {
            Side::B
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolCounters {
    pub available: u64,
    pub reserved: u64,
    pub consumed: u64,
}

impl PoolCounters {
    pub fn total(&self) -> u64 {
        self.available + self.reserved + self.consumed
    }
}

/// One endpoint's copy of a link's key stream.
#[derive(Debug, Clone)]
pub struct KeyPool {
    link: LinkId,
    side: Side,
    records: Vec<KeyRecord>,
    by_id: HashMap<KeyId, usize>,
    counters: PoolCounters,
    accesses: u64,
}

impl KeyPool {
    pub fn new(link: LinkId, side: Side) -> Self {
        Self {
            link,
            side,
            records: Vec::new(),
            by_id: HashMap::new(),
            counters: PoolCounters::default(),
            accesses: 0,
        }
    }

    pub fn link(&self) -> &LinkId {
        &self.link
    }

    pub fn side(&self) -> Side {
        self.side
    }

    fn append(&mut self, mut record: KeyRecord) {
        record.state = KeyState::Available;
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        self.counters.available += 1;
    }

    /// Reserves the oldest available key owned by this side.
    pub fn reserve_next(&mut self) -> Option<KeyRecord> {
        self.accesses += 1;
        let side = self.side;
        let rec = self
            .records
            .iter_mut()
            .find(|r| r.state == KeyState::Available && r.owner() == side)?;
        rec.state = KeyState::Reserved;
        self.counters.available -= 1;
        self.counters.reserved += 1;
        Some(rec.clone())
    }

    /// Marks a reserved key consumed. Returns false if it was not reserved.
    pub fn consume(&mut self, id: &KeyId) -> bool {
        self.accesses += 1;
        match self.by_id.get(id).map(|&i| &mut self.records[i]) {
            Some(rec) if rec.state == KeyState::Reserved => {
                rec.state = KeyState::Consumed;
                self.counters.reserved -= 1;
                self.counters.consumed += 1;
                true
            }
            _ => false,
        }
    }

    /// Looks up an available key by id and consumes it in one step.
    pub fn take_by_id(&mut self, id: &KeyId) -> Option<Octets> {
        self.accesses += 1;
        let rec = self.by_id.get(id).map(|&i| &mut self.records[i])?;
        if rec.state != KeyState::Available {
            return None;
        }
        rec.state = KeyState::Consumed;
        self.counters.available -= 1;
        self.counters.consumed += 1;
        Some(rec.material.clone())
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn state_of(&self, id: &KeyId) -> Option<KeyState> {
        self.by_id.get(id).map(|&i| self.records[i].state)
    }

    /// Drops a record entirely, desynchronizing this pool from its peer.
    pub fn remove(&mut self, id: &KeyId) -> Option<KeyRecord> {
        let i = self.by_id.remove(id)?;
        let rec = self.records.remove(i);
        for idx in self.by_id.values_mut() {
            if *idx > i {
                *idx -= 1;
            }
        }
        match rec.state {
            KeyState::Available => self.counters.available -= 1,
            KeyState::Reserved => self.counters.reserved -= 1,
            KeyState::Consumed => self.counters.consumed -= 1,
        }
        Some(rec)
    }

    pub fn records(&self) -> &[KeyRecord] {
        &self.records
    }

    /// `(id, material)` in generation order, for synchronization checks.
    pub fn sequence(&self) -> Vec<(KeyId, Octets)> {
        self.records
            .iter()
            .map(|r| (r.id.clone(), r.material.clone()))
            .collect()
    }

    pub fn counters(&self) -> PoolCounters {
        self.counters
    }

    /// Number of read operations performed on this pool by its owner.
    pub fn accesses(&self) -> u64 {
        self.accesses
    }
}

/// Seeded key source for one link.
#[derive(Debug, Clone)]
pub struct LinkSim {
    link: LinkId,
    key_rate: f64,
    key_size: usize,
    rng: ChaCha20Rng,
    issued: HashSet<KeyId>,
    generated: u64,
    carry: f64,
}

impl LinkSim {
    pub fn new(link: LinkId, key_rate: f64, key_size: usize, seed: u64) -> Self {
        Self {
            link,
            key_rate,
            key_size,
            rng: ChaCha20Rng::seed_from_u64(seed),
            issued: HashSet::new(),
            generated: 0,
            carry: 0.0,
        }
    }

    pub fn link(&self) -> &LinkId {
        &self.link
    }

    pub fn generated(&self) -> u64 {
        self.generated
    }

    fn next_record(&mut self) -> KeyRecord {
        let id = loop {
            let mut raw = [0u8; 16];
            self.rng.fill_bytes(&mut raw);
            let id = KeyId::new(hex::encode(raw));
            if self.issued.insert(id.clone()) {
                break id;
            }
        };
        let mut material = vec![0u8; self.key_size];
        self.rng.fill_bytes(&mut material);
        let record = KeyRecord {
            id,
            material: Octets::new(material),
            state: KeyState::Available,
            index: self.generated,
        };
        self.generated += 1;
        record
    }

    /// Appends `n` fresh keys to both endpoint pools and returns their ids.
    pub fn generate_keys(&mut self, n: u64, a: &mut KeyPool, b: &mut KeyPool) -> Vec<KeyId> {
        (0..n)
            .map(|_| {
                let rec = self.next_record();
                let id = rec.id.clone();
                a.append(rec.clone());
                b.append(rec);
                id
            })
            .collect()
    }

    /// Advances the link clock by `dt` seconds, generating `floor(rate * dt + carry)` keys.
    pub fn tick(&mut self, dt: f64, a: &mut KeyPool, b: &mut KeyPool) -> u64 {
        assert!(dt >= 0.0, "negative tick");
        let due = self.key_rate * dt + self.carry;
        // Absorb float noise such as 0.1 * 10 = 0.9999999999999999.
        let n = (due + 1e-9).floor().max(0.0);
        self.carry = (due - n).max(0.0);
        let n = n as u64;
        self.generate_keys(n, a, b);
        n
    }

    /// Appends a caller-built record to both pools, keeping them synchronized.
    /// The record's index is reassigned to the next generation slot.
    pub fn inject(&mut self, material: Octets, a: &mut KeyPool, b: &mut KeyPool) -> KeyId {
        let mut rec = self.next_record();
        rec.material = material;
        let id = rec.id.clone();
        a.append(rec.clone());
        b.append(rec);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools() -> (KeyPool, KeyPool) {
        (
            KeyPool::new("d".into(), Side::A),
            KeyPool::new("d".into(), Side::B),
        )
    }

    #[test]
    fn empty_batch() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 10.0, 32, 7);
        assert!(sim.generate_keys(0, &mut a, &mut b).is_empty());
        assert_eq!(a.counters().total(), 0);
    }

    #[test]
    fn generated_pools_are_identical() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 10.0, 32, 7);
        let ids = sim.generate_keys(3, &mut a, &mut b);
        assert_eq!(ids.len(), 3);
        assert_eq!(a.sequence(), b.sequence());
        assert!(a.records().iter().all(|r| r.material.len() == 32));
        assert!(ids.iter().all(|id| id.as_str().len() == 32
            && id.as_str().bytes().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase())));
    }

    #[test]
    fn same_seed_same_sequence() {
        let (mut a1, mut b1) = pools();
        let (mut a2, mut b2) = pools();
        LinkSim::new("d".into(), 1.0, 32, 42).generate_keys(5, &mut a1, &mut b1);
        LinkSim::new("d".into(), 1.0, 32, 42).generate_keys(5, &mut a2, &mut b2);
        assert_eq!(a1.sequence(), a2.sequence());
        let (mut a3, mut b3) = pools();
        LinkSim::new("d".into(), 1.0, 32, 43).generate_keys(5, &mut a3, &mut b3);
        assert_ne!(a1.sequence(), a3.sequence());
    }

    #[test]
    fn tick_rate_accounting() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 10.0, 32, 1);
        let n = sim.tick(0.5, &mut a, &mut b) + sim.tick(0.5, &mut a, &mut b);
        assert_eq!(n, 10);
        assert_eq!(a.counters().available, 10);
    }

    #[test]
    fn dead_link_generates_nothing() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 0.0, 32, 1);
        assert_eq!(sim.tick(100.0, &mut a, &mut b), 0);
    }

    #[test]
    fn fractional_rate_carries() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 2.5, 32, 1);
        let counts: Vec<u64> = (0..4).map(|_| sim.tick(1.0, &mut a, &mut b)).collect();
        assert_eq!(counts, vec![2, 3, 2, 3]);
        // Closed form: rate * total_dt.
        assert_eq!(counts.iter().sum::<u64>(), (2.5f64 * 4.0) as u64);
    }

    #[test]
    fn tenth_rate_does_not_lose_keys_to_rounding() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 0.1, 32, 1);
        let n: u64 = (0..100).map(|_| sim.tick(1.0, &mut a, &mut b)).sum();
        assert_eq!(n, 10);
    }

    #[test]
    fn reservation_respects_ownership_and_fifo() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 1.0, 32, 3);
        let ids = sim.generate_keys(4, &mut a, &mut b);
        assert_eq!(a.reserve_next().unwrap().id, ids[0]);
        assert_eq!(b.reserve_next().unwrap().id, ids[1]);
        assert_eq!(a.reserve_next().unwrap().id, ids[2]);
        assert_eq!(b.reserve_next().unwrap().id, ids[3]);
        assert!(a.reserve_next().is_none());
    }

    #[test]
    fn key_leaves_available_once() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 1.0, 32, 3);
        let ids = sim.generate_keys(2, &mut a, &mut b);
        let k = a.reserve_next().unwrap();
        assert!(a.take_by_id(&k.id).is_none());
        assert!(a.consume(&k.id));
        assert!(!a.consume(&k.id));
        assert_eq!(b.take_by_id(&ids[0]), Some(k.material));
        assert!(b.take_by_id(&ids[0]).is_none());
        let c = a.counters();
        assert_eq!((c.available, c.reserved, c.consumed), (1, 0, 1));
    }

    #[test]
    fn remove_desynchronizes() {
        let (mut a, mut b) = pools();
        let mut sim = LinkSim::new("d".into(), 1.0, 32, 3);
        let ids = sim.generate_keys(3, &mut a, &mut b);
        assert!(b.remove(&ids[1]).is_some());
        assert!(!b.contains(&ids[1]));
        assert_eq!(b.state_of(&ids[2]), Some(KeyState::Available));
        assert_eq!(b.counters().total(), 2);
        assert!(b.take_by_id(&ids[2]).is_some());
    }
}
