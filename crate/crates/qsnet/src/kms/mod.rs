//! Per-node key store and key-delivery service.
//!
//! Keys arrive from any registered supplier (QKD links, emulated links,
//! border bridges, relays) in a transparent manner and are served to
//! applications through a session-based interface with QoS (004-style)
//! and a fetch-based master/slave interface (014-style). The store also
//! performs node-local hybridization across supplier streams.
//!
//! Every delivery marks the key consumed before it leaves the store;
//! a consumed key is never served again. All operations take the
//! current time explicitly, so the store itself never reads a clock.

pub mod persist;
pub mod proto;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::core::{KeyEntry, KeyId, KeyMaterial, NodeId, ValidationError, ValidityWindow};
use crate::crypto::{self, hash128};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KmsError {
    #[error("supplier '{supplier}' not registered for peer {peer}")]
    UnknownSupplier { peer: NodeId, supplier: String },
    #[error("conflicting bytes for key {key_id} from supplier '{supplier}'")]
    IntegrityConflict { supplier: String, key_id: KeyId },
    #[error("no key available, retry after {retry_after:?}")]
    NoKeyAvailable { retry_after: Duration },
    #[error("unknown key session {0}")]
    UnknownKsid(KeyId),
    #[error("unknown key {key_id} for peer {peer}")]
    UnknownKeyId { peer: NodeId, key_id: KeyId },
    #[error("key {0} already consumed")]
    AlreadyConsumed(KeyId),
    #[error("key {0} outside its validity window")]
    Expired(KeyId),
    #[error("requested QoS unsatisfiable: {0}")]
    QosUnsatisfiable(String),
    #[error("hybridization needs at least two suppliers")]
    NeedTwoSuppliers,
    #[error("supplier '{0}' has no usable key")]
    SupplierStarved(String),
    #[error("node {node} is not an endpoint of ({session_source}, {session_destination})")]
    NotAnEndpoint {
        node: NodeId,
        session_source: NodeId,
        session_destination: NodeId,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
}

/// Requested delivery quality: key rate and key length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KeyQos {
    pub rate_bps: u64,
    pub key_len: u32,
}

/// Why a key was consumed; kept for the audit ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConsumePurpose {
    Delivery,
    RelayPad,
    Hybridize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsumptionRecord {
    pub peer: NodeId,
    pub supplier: String,
    pub key_id: KeyId,
    pub purpose: ConsumePurpose,
    pub at_s: u64,
}

/// Which half of a link's key stream a node may consume for one-time-pad
/// wrapping. Both endpoints hold identical streams; partitioning by the
/// low bit of the key id keeps opposite-direction relays from padding
/// two different payloads with the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadParity {
    Even,
    Odd,
}

pub fn key_parity(key_id: &KeyId) -> PadParity {
    if key_id.as_bytes()[15] & 1 == 0 {
        PadParity::Even
    } else {
        PadParity::Odd
    }
}

/// The wrapping side of a hop picks pads from its own half of the
/// stream; the unwrapping side retrieves the named key by id.
pub fn pad_parity_for(wrapper: &NodeId, peer: &NodeId) -> PadParity {
    if wrapper < peer {
        PadParity::Even
    } else {
        PadParity::Odd
    }
}

#[derive(Debug, Clone)]
struct SupplierInfo {
    key_len: u32,
    rate_bps: u64,
}

#[derive(Debug, Clone)]
struct StoredEntry {
    entry: KeyEntry,
    consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeySession {
    pub ksid: KeyId,
    pub source: NodeId,
    pub destination: NodeId,
    pub qos: KeyQos,
    pub opened_at_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ListingRow {
    pub key_id: KeyId,
    pub peer: NodeId,
    pub supplier: String,
    pub label: String,
    pub consumed: bool,
    pub live: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Stored,
    Duplicate,
}

/// One node's synchronized key store.
#[derive(Debug)]
pub struct KeyStore {
    node: NodeId,
    suppliers: BTreeMap<(NodeId, String), SupplierInfo>,
    entries: BTreeMap<(NodeId, String, KeyId), StoredEntry>,
    sessions: BTreeMap<KeyId, KeySession>,
    session_counter: u64,
    delivered: Vec<(NodeId, String, KeyId)>,
    consumption_log: Vec<ConsumptionRecord>,
    integrity_alarms: u64,
    persist: Option<File>,
}

impl KeyStore {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            suppliers: BTreeMap::new(),
            entries: BTreeMap::new(),
            sessions: BTreeMap::new(),
            session_counter: 0,
            delivered: Vec::new(),
            consumption_log: Vec::new(),
            integrity_alarms: 0,
            persist: None,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    /// Append every future push to `path` as length-prefixed canonical
    /// records; existing records are replayed into the store first.
    pub fn enable_persistence(&mut self, path: &Path) -> std::io::Result<usize> {
        let (entries, _truncated) = persist::load_entries(path)?;
        let mut recovered = 0;
        for entry in entries {
            let key = (entry.peer.clone(), entry.supplier_id.clone(), entry.key_id);
            if !self.suppliers.contains_key(&(entry.peer.clone(), entry.supplier_id.clone())) {
                self.register_supplier(
                    entry.peer.clone(),
                    &entry.supplier_id,
                    entry.key.len() as u32,
                    0,
                );
            }
            self.entries.entry(key).or_insert(StoredEntry {
                entry,
                consumed: false,
            });
            recovered += 1;
        }
        self.persist = Some(persist::open_append(path)?);
        Ok(recovered)
    }

    pub fn register_supplier(
        &mut self,
        peer: NodeId,
        supplier: &str,
        key_len: u32,
        rate_bps: u64,
    ) {
        self.suppliers
            .insert((peer, supplier.to_string()), SupplierInfo { key_len, rate_bps });
    }

    pub fn supplier_registered(&self, peer: &NodeId, supplier: &str) -> bool {
        self.suppliers
            .contains_key(&(peer.clone(), supplier.to_string()))
    }

    /// Accept a key from a supplier. Idempotent for identical bytes;
    /// conflicting bytes for the same (key_id, supplier) raise an
    /// integrity alarm and never overwrite.
    pub fn push_key(&mut self, supplier_id: &str, entry: KeyEntry) -> Result<PushOutcome, KmsError> {
        if entry.supplier_id != supplier_id {
            return Err(ValidationError::new(
                "supplier_id",
                format!(
                    "entry names supplier '{}' but was pushed as '{supplier_id}'",
                    entry.supplier_id
                ),
            )
            .into());
        }
        if !self.supplier_registered(&entry.peer, supplier_id) {
            return Err(KmsError::UnknownSupplier {
                peer: entry.peer.clone(),
                supplier: supplier_id.to_string(),
            });
        }
        let key = (entry.peer.clone(), entry.supplier_id.clone(), entry.key_id);
        if let Some(existing) = self.entries.get(&key) {
            if existing.entry.key == entry.key {
                return Ok(PushOutcome::Duplicate);
            }
            self.integrity_alarms += 1;
            return Err(KmsError::IntegrityConflict {
                supplier: supplier_id.to_string(),
                key_id: entry.key_id,
            });
        }
        if let Some(file) = &mut self.persist {
            // Best-effort journal; the in-memory store stays authoritative.
            if let Err(e) = persist::append_entry(file, &entry) {
                log::warn!("kms persistence append failed: {e}");
            }
        }
        self.entries.insert(key, StoredEntry {
            entry,
            consumed: false,
        });
        Ok(PushOutcome::Stored)
    }

    fn live(entry: &KeyEntry, now_s: u64) -> bool {
        entry.validity.contains(now_s)
    }

    pub fn unconsumed_count(
        &self,
        peer: &NodeId,
        supplier: &str,
        key_len: Option<u32>,
        parity: Option<PadParity>,
        now_s: u64,
    ) -> usize {
        self.entries
            .range(range_for(peer, supplier))
            .filter(|(_, s)| {
                !s.consumed
                    && Self::live(&s.entry, now_s)
                    && key_len.is_none_or(|l| s.entry.key.len() as u32 == l)
                    && parity.is_none_or(|p| key_parity(&s.entry.key_id) == p)
            })
            .count()
    }

    fn consume(&mut self, key: &(NodeId, String, KeyId), purpose: ConsumePurpose, now_s: u64) -> KeyEntry {
        let stored = self.entries.get_mut(key).expect("consume of known entry");
        debug_assert!(!stored.consumed);
        stored.consumed = true;
        self.consumption_log.push(ConsumptionRecord {
            peer: key.0.clone(),
            supplier: key.1.clone(),
            key_id: key.2,
            purpose,
            at_s: now_s,
        });
        stored.entry.clone()
    }

    /// Consume the lowest unconsumed, in-validity key id from one
    /// supplier stream. The deterministic pick is what keeps both
    /// endpoints of a link in lockstep.
    pub fn consume_lowest(
        &mut self,
        peer: &NodeId,
        supplier: &str,
        key_len: Option<u32>,
        parity: Option<PadParity>,
        purpose: ConsumePurpose,
        now_s: u64,
    ) -> Result<KeyEntry, KmsError> {
        let key = self
            .entries
            .range(range_for(peer, supplier))
            .find(|(_, s)| {
                !s.consumed
                    && Self::live(&s.entry, now_s)
                    && key_len.is_none_or(|l| s.entry.key.len() as u32 == l)
                    && parity.is_none_or(|p| key_parity(&s.entry.key_id) == p)
            })
            .map(|(k, _)| k.clone())
            .ok_or_else(|| KmsError::SupplierStarved(supplier.to_string()))?;
        Ok(self.consume(&key, purpose, now_s))
    }

    /// Consume one specific key, as the unwrapping side of a relay hop
    /// or the slave side of a 014 fetch does.
    pub fn consume_by_id(
        &mut self,
        peer: &NodeId,
        supplier: &str,
        key_id: KeyId,
        purpose: ConsumePurpose,
        now_s: u64,
    ) -> Result<KeyEntry, KmsError> {
        let key = (peer.clone(), supplier.to_string(), key_id);
        let stored = self.entries.get(&key).ok_or(KmsError::UnknownKeyId {
            peer: peer.clone(),
            key_id,
        })?;
        if stored.consumed {
            return Err(KmsError::AlreadyConsumed(key_id));
        }
        if !Self::live(&stored.entry, now_s) {
            return Err(KmsError::Expired(key_id));
        }
        Ok(self.consume(&key, purpose, now_s))
    }

    /// Drop a pushed-but-unconsumed entry. Used by the link engines to
    /// repair the store after an outage left one side ahead.
    pub fn revoke_unconsumed(&mut self, peer: &NodeId, supplier: &str, key_id: KeyId) -> bool {
        let key = (peer.clone(), supplier.to_string(), key_id);
        match self.entries.get(&key) {
            Some(stored) if !stored.consumed => {
                self.entries.remove(&key);
                true
            }
            _ => false,
        }
    }

    // --- 004-style session interface ---

    pub fn open_connect(
        &mut self,
        source: NodeId,
        destination: NodeId,
        qos: KeyQos,
        ksid: Option<KeyId>,
        now_s: u64,
    ) -> Result<KeyId, KmsError> {
        let peer = self.peer_of(&source, &destination)?;
        let candidates: Vec<&SupplierInfo> = self
            .suppliers
            .range((peer.clone(), String::new())..(peer.clone(), "\u{10FFFF}".to_string()))
            .map(|(_, info)| info)
            .filter(|info| info.key_len == qos.key_len)
            .collect();
        if candidates.is_empty() {
            return Err(KmsError::QosUnsatisfiable(format!(
                "no supplier provides {}-byte keys for peer {peer}",
                qos.key_len
            )));
        }
        let total_rate: u64 = candidates.iter().map(|i| i.rate_bps).sum();
        if total_rate < qos.rate_bps {
            return Err(KmsError::QosUnsatisfiable(format!(
                "suppliers provide {total_rate} bit/s, {} requested",
                qos.rate_bps
            )));
        }
        let ksid = ksid.unwrap_or_else(|| {
            self.session_counter += 1;
            KeyId::from_bytes(hash128(
                "qsnet.ksid",
                &[
                    self.node.to_string().as_bytes(),
                    source.to_string().as_bytes(),
                    destination.to_string().as_bytes(),
                    &self.session_counter.to_be_bytes(),
                ],
            ))
        });
        self.sessions.insert(ksid, KeySession {
            ksid,
            source,
            destination,
            qos,
            opened_at_s: now_s,
        });
        Ok(ksid)
    }

    pub fn get_key(&mut self, ksid: KeyId, now_s: u64) -> Result<(KeyMaterial, KeyId), KmsError> {
        let session = self
            .sessions
            .get(&ksid)
            .ok_or(KmsError::UnknownKsid(ksid))?
            .clone();
        let peer = self.peer_of(&session.source, &session.destination)?;
        let pick = self
            .entries
            .range(peer_range(&peer))
            .filter(|(_, s)| {
                !s.consumed
                    && Self::live(&s.entry, now_s)
                    && s.entry.key.len() as u32 == session.qos.key_len
            })
            // Lowest key id first, supplier name breaking ties: the same
            // rule at both endpoints yields the same sequence.
            .min_by(|(ka, _), (kb, _)| (ka.2, &ka.1).cmp(&(kb.2, &kb.1)))
            .map(|(k, _)| k.clone());
        let Some(key) = pick else {
            return Err(KmsError::NoKeyAvailable {
                retry_after: self.retry_after(&peer, session.qos.key_len),
            });
        };
        let entry = self.consume(&key, ConsumePurpose::Delivery, now_s);
        self.delivered.push(key);
        Ok((entry.key, entry.key_id))
    }

    pub fn close(&mut self, ksid: KeyId) -> Result<(), KmsError> {
        self.sessions
            .remove(&ksid)
            .map(|_| ())
            .ok_or(KmsError::UnknownKsid(ksid))
    }

    fn peer_of(&self, source: &NodeId, destination: &NodeId) -> Result<NodeId, KmsError> {
        if *source == self.node {
            Ok(destination.clone())
        } else if *destination == self.node {
            Ok(source.clone())
        } else {
            Err(KmsError::NotAnEndpoint {
                node: self.node.clone(),
                session_source: source.clone(),
                session_destination: destination.clone(),
            })
        }
    }

    fn retry_after(&self, peer: &NodeId, key_len: u32) -> Duration {
        self.suppliers
            .range((peer.clone(), String::new())..(peer.clone(), "\u{10FFFF}".to_string()))
            .filter(|(_, info)| info.key_len == key_len && info.rate_bps > 0)
            .map(|(_, info)| {
                Duration::from_secs_f64(8.0 * f64::from(info.key_len) / info.rate_bps as f64)
            })
            .min()
            .unwrap_or(Duration::from_secs(1))
    }

    // --- 014-style fetch interface ---

    /// Master side: obtain `number` fresh keys of `size` bytes together
    /// with their ids.
    pub fn get_key_014(
        &mut self,
        _requester: &NodeId,
        peer: &NodeId,
        number: u32,
        size: u32,
        now_s: u64,
    ) -> Result<Vec<(KeyId, KeyMaterial)>, KmsError> {
        if number == 0 {
            return Err(ValidationError::new("number", "must be at least 1").into());
        }
        let supported = self
            .suppliers
            .range((peer.clone(), String::new())..(peer.clone(), "\u{10FFFF}".to_string()))
            .any(|(_, info)| info.key_len == size);
        if !supported {
            return Err(KmsError::QosUnsatisfiable(format!(
                "no supplier provides {size}-byte keys for peer {peer}"
            )));
        }
        let picks: Vec<(NodeId, String, KeyId)> = self
            .entries
            .range(peer_range(peer))
            .filter(|(_, s)| {
                !s.consumed && Self::live(&s.entry, now_s) && s.entry.key.len() as u32 == size
            })
            .map(|(k, _)| k.clone())
            .take(number as usize)
            .collect();
        if picks.len() < number as usize {
            return Err(KmsError::NoKeyAvailable {
                retry_after: self.retry_after(peer, size),
            });
        }
        let mut out = Vec::with_capacity(picks.len());
        for key in picks {
            let entry = self.consume(&key, ConsumePurpose::Delivery, now_s);
            self.delivered.push(key);
            out.push((entry.key_id, entry.key));
        }
        Ok(out)
    }

    /// Slave side: retrieve the keys the master named. Atomic — an
    /// unknown or consumed id fails the whole call with nothing consumed.
    pub fn get_key_with_ids(
        &mut self,
        _requester: &NodeId,
        peer: &NodeId,
        ids: &[KeyId],
        now_s: u64,
    ) -> Result<Vec<(KeyId, KeyMaterial)>, KmsError> {
        let mut picks = Vec::with_capacity(ids.len());
        for id in ids {
            let found = self
                .entries
                .range(peer_range(peer))
                .find(|(k, _)| k.2 == *id);
            let (key, stored) = found.ok_or(KmsError::UnknownKeyId {
                peer: peer.clone(),
                key_id: *id,
            })?;
            if stored.consumed {
                return Err(KmsError::AlreadyConsumed(*id));
            }
            if !Self::live(&stored.entry, now_s) {
                return Err(KmsError::Expired(*id));
            }
            picks.push(key.clone());
        }
        let mut out = Vec::with_capacity(picks.len());
        for key in picks {
            let entry = self.consume(&key, ConsumePurpose::Delivery, now_s);
            self.delivered.push(key);
            out.push((entry.key_id, entry.key));
        }
        Ok(out)
    }

    // --- hybridization ---

    /// Consume one key from each listed supplier and store their XOR as
    /// a new hybrid entry. All-or-nothing: a starved supplier consumes
    /// nothing. Both endpoints picking by the same deterministic rule
    /// produce the same entry, including its id.
    pub fn hybridize_stores(
        &mut self,
        peer: &NodeId,
        suppliers: &[String],
        now_s: u64,
    ) -> Result<KeyEntry, KmsError> {
        if suppliers.len() < 2 {
            return Err(KmsError::NeedTwoSuppliers);
        }
        let mut sorted: Vec<&String> = suppliers.iter().collect();
        sorted.sort();
        sorted.dedup();
        if sorted.len() < 2 {
            return Err(KmsError::NeedTwoSuppliers);
        }
        // Pick first without consuming so starvation aborts cleanly.
        let mut picks: Vec<(NodeId, String, KeyId)> = Vec::with_capacity(sorted.len());
        for supplier in &sorted {
            let found = self
                .entries
                .range(range_for(peer, supplier))
                .find(|(_, s)| !s.consumed && Self::live(&s.entry, now_s))
                .map(|(k, _)| k.clone())
                .ok_or_else(|| KmsError::SupplierStarved(supplier.to_string()))?;
            picks.push(found);
        }
        let inputs: Vec<KeyEntry> = picks
            .iter()
            .map(|k| self.entries[k].entry.clone())
            .collect();
        let len = inputs[0].key.len();
        if let Some(bad) = inputs.iter().find(|e| e.key.len() != len) {
            return Err(crypto::CryptoError::LengthMismatch {
                what: "hybridize input",
                expected: len,
                actual: bad.key.len(),
            }
            .into());
        }
        let key_refs: Vec<&KeyMaterial> = inputs.iter().map(|e| &e.key).collect();
        let hybrid_key = crypto::hybridize(&key_refs)?;
        let mut id_concat = Vec::with_capacity(16 * inputs.len());
        for e in &inputs {
            id_concat.extend_from_slice(e.key_id.as_bytes());
        }
        let key_id = KeyId::from_bytes(hash128("qsnet.hybrid", &[&id_concat]));
        let label = inputs
            .iter()
            .skip(1)
            .fold(inputs[0].label.clone(), |acc, e| acc.parallel(&e.label));
        let start = inputs.iter().map(|e| e.validity.start_s).max().unwrap();
        let end = inputs.iter().map(|e| e.validity.end_s).min().unwrap();
        let validity = ValidityWindow::new(start, end)?;
        let supplier_id = format!(
            "hybrid:{}",
            sorted
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join("+")
        );
        let entry = KeyEntry::new(key_id, hybrid_key, peer.clone(), &supplier_id, validity, label)?;

        // Point of no return: consume the inputs, then store the hybrid.
        for pick in &picks {
            self.consume(pick, ConsumePurpose::Hybridize, now_s);
        }
        if !self.supplier_registered(peer, &supplier_id) {
            let key_len = len as u32;
            let rate = picks
                .iter()
                .map(|k| self.suppliers.get(&(k.0.clone(), k.1.clone())).map_or(0, |i| i.rate_bps))
                .min()
                .unwrap_or(0);
            self.register_supplier(peer.clone(), &supplier_id, key_len, rate);
        }
        self.push_key(&supplier_id, entry.clone())?;
        Ok(entry)
    }

    // --- views ---

    pub fn listing(&self, now_s: u64) -> Vec<ListingRow> {
        self.entries
            .iter()
            .map(|((peer, supplier, key_id), s)| ListingRow {
                key_id: *key_id,
                peer: peer.clone(),
                supplier: supplier.clone(),
                label: s.entry.label.to_string(),
                consumed: s.consumed,
                live: Self::live(&s.entry, now_s),
            })
            .collect()
    }

    pub fn entry(&self, peer: &NodeId, supplier: &str, key_id: KeyId) -> Option<&KeyEntry> {
        self.entries
            .get(&(peer.clone(), supplier.to_string(), key_id))
            .map(|s| &s.entry)
    }

    pub fn contains_key_id(&self, key_id: KeyId) -> bool {
        self.entries.keys().any(|k| k.2 == key_id)
    }

    pub fn delivered_log(&self) -> &[(NodeId, String, KeyId)] {
        &self.delivered
    }

    pub fn consumption_log(&self) -> &[ConsumptionRecord] {
        &self.consumption_log
    }

    pub fn integrity_alarms(&self) -> u64 {
        self.integrity_alarms
    }

    /// (total, consumed) per (peer, supplier), for reports.
    pub fn supplier_counts(&self) -> BTreeMap<(NodeId, String), (u64, u64)> {
        let mut out: BTreeMap<(NodeId, String), (u64, u64)> = BTreeMap::new();
        for ((peer, supplier, _), s) in &self.entries {
            let slot = out.entry((peer.clone(), supplier.clone())).or_default();
            slot.0 += 1;
            if s.consumed {
                slot.1 += 1;
            }
        }
        out
    }

    /// Entries (unconsumed and consumed) for one (peer, supplier).
    pub fn entries_for(&self, peer: &NodeId, supplier: &str) -> Vec<&KeyEntry> {
        self.entries
            .range(range_for(peer, supplier))
            .map(|(_, s)| &s.entry)
            .collect()
    }
}

type EntryKey = (NodeId, String, KeyId);

fn range_for(peer: &NodeId, supplier: &str) -> std::ops::RangeInclusive<EntryKey> {
    let lo = (peer.clone(), supplier.to_string(), KeyId::from_bytes([0; 16]));
    let hi = (
        peer.clone(),
        supplier.to_string(),
        KeyId::from_bytes([0xFF; 16]),
    );
    lo..=hi
}

fn peer_range(peer: &NodeId) -> std::ops::RangeInclusive<EntryKey> {
    let lo = (peer.clone(), String::new(), KeyId::from_bytes([0; 16]));
    let hi = (
        peer.clone(),
        "\u{10FFFF}".to_string(),
        KeyId::from_bytes([0xFF; 16]),
    );
    lo..=hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seclevel::{SecurityExpr, SecurityLabel};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn node(d: &str, n: &str) -> NodeId {
        NodeId::new(d, n).unwrap()
    }

    fn entry_with(
        rng: &mut ChaCha12Rng,
        peer: &NodeId,
        supplier: &str,
        label: SecurityExpr,
    ) -> KeyEntry {
        let mut key = vec![0u8; 32];
        rng.fill_bytes(&mut key);
        KeyEntry::new(
            KeyId::random(rng),
            KeyMaterial::new(key).unwrap(),
            peer.clone(),
            supplier,
            ValidityWindow::new(0, 3600).unwrap(),
            label,
        )
        .unwrap()
    }

    fn its_label() -> SecurityExpr {
        SecurityExpr::atom(SecurityLabel::its(["sc1"]))
    }

    fn store_with_keys(n: usize) -> (KeyStore, NodeId, Vec<KeyEntry>) {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let me = node("d", "me");
        let peer = node("d", "peer");
        let mut store = KeyStore::new(me);
        store.register_supplier(peer.clone(), "link:x", 32, 256);
        let mut entries = Vec::new();
        for _ in 0..n {
            let e = entry_with(&mut rng, &peer, "link:x", its_label());
            store.push_key("link:x", e.clone()).unwrap();
            entries.push(e);
        }
        (store, peer, entries)
    }

    #[test]
    fn push_then_fetch_same_bytes() {
        let (mut store, peer, entries) = store_with_keys(1);
        let me = node("d", "me");
        let out = store
            .get_key_with_ids(&me, &peer, &[entries[0].key_id], 10)
            .unwrap();
        assert_eq!(out[0].1, entries[0].key);
    }

    #[test]
    fn double_push_identical_is_one_entry() {
        let (mut store, _, entries) = store_with_keys(1);
        let outcome = store.push_key("link:x", entries[0].clone()).unwrap();
        assert_eq!(outcome, PushOutcome::Duplicate);
        assert_eq!(store.listing(0).len(), 1);
    }

    #[test]
    fn conflicting_bytes_raise_integrity_alarm() {
        let (mut store, _, entries) = store_with_keys(1);
        let mut conflicting = entries[0].clone();
        conflicting.key = KeyMaterial::new(vec![0xEE; 32]).unwrap();
        let err = store.push_key("link:x", conflicting).unwrap_err();
        assert!(matches!(err, KmsError::IntegrityConflict { .. }));
        assert_eq!(store.integrity_alarms(), 1);
        // Original bytes survive.
        let kept = store
            .entry(&entries[0].peer, "link:x", entries[0].key_id)
            .unwrap();
        assert_eq!(kept.key, entries[0].key);
    }

    #[test]
    fn unregistered_supplier_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut store = KeyStore::new(node("d", "me"));
        let e = entry_with(&mut rng, &node("d", "peer"), "rogue", its_label());
        assert!(matches!(
            store.push_key("rogue", e),
            Err(KmsError::UnknownSupplier { .. })
        ));
    }

    #[test]
    fn session_flow_serves_and_closes() {
        let (mut store, peer, _) = store_with_keys(3);
        let me = node("d", "me");
        let qos = KeyQos {
            rate_bps: 256,
            key_len: 32,
        };
        let ksid = store
            .open_connect(me.clone(), peer.clone(), qos, None, 0)
            .unwrap();
        let (_, id1) = store.get_key(ksid, 1).unwrap();
        let (_, id2) = store.get_key(ksid, 2).unwrap();
        assert_ne!(id1, id2);
        store.close(ksid).unwrap();
        assert!(matches!(
            store.get_key(ksid, 3),
            Err(KmsError::UnknownKsid(_))
        ));
    }

    #[test]
    fn qos_refused_at_open_when_unsatisfiable() {
        let (mut store, peer, _) = store_with_keys(1);
        let me = node("d", "me");
        // Wrong length.
        assert!(matches!(
            store.open_connect(
                me.clone(),
                peer.clone(),
                KeyQos { rate_bps: 8, key_len: 64 },
                None,
                0
            ),
            Err(KmsError::QosUnsatisfiable(_))
        ));
        // Rate above supply.
        assert!(matches!(
            store.open_connect(
                me,
                peer,
                KeyQos { rate_bps: 100_000, key_len: 32 },
                None,
                0
            ),
            Err(KmsError::QosUnsatisfiable(_))
        ));
    }

    #[test]
    fn exhausted_store_hints_retry_after() {
        let (mut store, peer, _) = store_with_keys(1);
        let me = node("d", "me");
        let ksid = store
            .open_connect(
                me,
                peer,
                KeyQos { rate_bps: 256, key_len: 32 },
                None,
                0,
            )
            .unwrap();
        store.get_key(ksid, 0).unwrap();
        match store.get_key(ksid, 0) {
            Err(KmsError::NoKeyAvailable { retry_after }) => {
                // 256 bits at 256 bit/s: one second.
                assert_eq!(retry_after, Duration::from_secs(1));
            }
            other => panic!("expected NoKeyAvailable, got {other:?}"),
        }
    }

    #[test]
    fn master_slave_symmetry_and_single_use() {
        // Two stores holding the same stream, as the two ends of a link do.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let alice = node("d", "alice");
        let bob = node("d", "bob");
        let mut store_a = KeyStore::new(alice.clone());
        let mut store_b = KeyStore::new(bob.clone());
        store_a.register_supplier(bob.clone(), "link:x", 32, 256);
        store_b.register_supplier(alice.clone(), "link:x", 32, 256);
        for _ in 0..5 {
            let e = entry_with(&mut rng, &bob, "link:x", its_label());
            store_a.push_key("link:x", e.clone()).unwrap();
            let mut mirrored = e.clone();
            mirrored.peer = alice.clone();
            store_b.push_key("link:x", mirrored).unwrap();
        }
        let got = store_a.get_key_014(&alice, &bob, 3, 32, 1).unwrap();
        let ids: Vec<KeyId> = got.iter().map(|(id, _)| *id).collect();
        let slave = store_b.get_key_with_ids(&bob, &alice, &ids, 1).unwrap();
        assert_eq!(got, slave);

        // Single use on both sides.
        assert!(matches!(
            store_b.get_key_with_ids(&bob, &alice, &ids[..1], 1),
            Err(KmsError::AlreadyConsumed(_))
        ));
        let unknown = KeyId::from_bytes([7; 16]);
        assert!(matches!(
            store_b.get_key_with_ids(&bob, &alice, &[unknown], 1),
            Err(KmsError::UnknownKeyId { .. })
        ));
        // Ledger: no store ever delivered the same key twice.
        for store in [&store_a, &store_b] {
            let log = store.delivered_log();
            let unique: std::collections::BTreeSet<_> = log.iter().collect();
            assert_eq!(unique.len(), log.len());
        }
    }

    #[test]
    fn expired_key_never_served() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let me = node("d", "me");
        let peer = node("d", "peer");
        let mut store = KeyStore::new(me.clone());
        store.register_supplier(peer.clone(), "link:x", 32, 256);
        let mut e = entry_with(&mut rng, &peer, "link:x", its_label());
        e.validity = ValidityWindow::new(0, 100).unwrap();
        let id = e.key_id;
        store.push_key("link:x", e).unwrap();
        // One second after end.
        assert!(matches!(
            store.get_key_with_ids(&me, &peer, &[id], 101),
            Err(KmsError::Expired(_))
        ));
        assert!(matches!(
            store.get_key_014(&me, &peer, 1, 32, 101),
            Err(KmsError::NoKeyAvailable { .. })
        ));
    }

    #[test]
    fn consume_twice_is_pad_reuse_error() {
        let (mut store, peer, entries) = store_with_keys(1);
        let id = entries[0].key_id;
        store
            .consume_by_id(&peer, "link:x", id, ConsumePurpose::RelayPad, 1)
            .unwrap();
        assert_eq!(
            store
                .consume_by_id(&peer, "link:x", id, ConsumePurpose::RelayPad, 1)
                .unwrap_err(),
            KmsError::AlreadyConsumed(id)
        );
    }

    #[test]
    fn hybridize_mixes_labels_per_parallel_rule() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let me = node("d", "me");
        let peer = node("d", "peer");
        let mut store = KeyStore::new(me);
        store.register_supplier(peer.clone(), "link:qkd", 32, 256);
        store.register_supplier(peer.clone(), "link:pqc", 32, 256);
        let qkd = entry_with(
            &mut rng,
            &peer,
            "link:qkd",
            SecurityExpr::atom(SecurityLabel::its(["sc1"])),
        );
        let pqc = entry_with(
            &mut rng,
            &peer,
            "link:pqc",
            SecurityExpr::atom(SecurityLabel::mc(["sc2"])),
        );
        store.push_key("link:qkd", qkd.clone()).unwrap();
        store.push_key("link:pqc", pqc.clone()).unwrap();
        let hybrid = store
            .hybridize_stores(&peer, &["link:qkd".into(), "link:pqc".into()], 1)
            .unwrap();
        // (ITS \ sc1) ∪ (MC \ sc2)
        let expected = SecurityExpr::atom(SecurityLabel::its(["sc1"]))
            .parallel(&SecurityExpr::atom(SecurityLabel::mc(["sc2"])));
        assert_eq!(hybrid.label, expected);
        assert_eq!(
            hybrid.key,
            crypto::hybridize(&[&qkd.key, &pqc.key]).unwrap()
        );
        assert!(hybrid.supplier_id.starts_with("hybrid:"));
    }

    #[test]
    fn hybridize_needs_two_suppliers_and_is_all_or_nothing() {
        let (mut store, peer, _) = store_with_keys(1);
        assert!(matches!(
            store.hybridize_stores(&peer, &["link:x".into()], 1),
            Err(KmsError::NeedTwoSuppliers)
        ));
        store.register_supplier(peer.clone(), "link:empty", 32, 256);
        let err = store
            .hybridize_stores(&peer, &["link:x".into(), "link:empty".into()], 1)
            .unwrap_err();
        assert!(matches!(err, KmsError::SupplierStarved(_)));
        // Nothing consumed by the failed attempt.
        assert_eq!(store.unconsumed_count(&peer, "link:x", None, None, 1), 1);
    }

    #[test]
    fn hybridize_identical_at_both_endpoints() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let alice = node("d", "alice");
        let bob = node("d", "bob");
        let mut store_a = KeyStore::new(alice.clone());
        let mut store_b = KeyStore::new(bob.clone());
        for s in ["link:1", "link:2"] {
            store_a.register_supplier(bob.clone(), s, 32, 256);
            store_b.register_supplier(alice.clone(), s, 32, 256);
        }
        for s in ["link:1", "link:2"] {
            for _ in 0..3 {
                let e = entry_with(&mut rng, &bob, s, its_label());
                store_a.push_key(s, e.clone()).unwrap();
                let mut m = e;
                m.peer = alice.clone();
                store_b.push_key(s, m).unwrap();
            }
        }
        let suppliers = vec!["link:1".to_string(), "link:2".to_string()];
        let ha = store_a.hybridize_stores(&bob, &suppliers, 1).unwrap();
        let hb = store_b.hybridize_stores(&alice, &suppliers, 1).unwrap();
        assert_eq!(ha.key_id, hb.key_id);
        assert_eq!(ha.key, hb.key);
    }

    #[test]
    fn revoke_only_removes_unconsumed() {
        let (mut store, peer, entries) = store_with_keys(2);
        let id0 = entries[0].key_id;
        store
            .consume_by_id(&peer, "link:x", id0, ConsumePurpose::Delivery, 1)
            .unwrap();
        assert!(!store.revoke_unconsumed(&peer, "link:x", id0));
        assert!(store.revoke_unconsumed(&peer, "link:x", entries[1].key_id));
        assert_eq!(store.listing(1).len(), 1);
    }

    #[test]
    fn parity_partitions_the_stream() {
        let even = KeyId::from_bytes([0; 16]);
        let odd = KeyId::from_bytes([1; 16]);
        assert_eq!(key_parity(&even), PadParity::Even);
        assert_eq!(key_parity(&odd), PadParity::Odd);
        let a = node("d", "a");
        let b = node("d", "b");
        assert_eq!(pad_parity_for(&a, &b), PadParity::Even);
        assert_eq!(pad_parity_for(&b, &a), PadParity::Odd);
    }
}
