//! Domain types shared by every other module. No behavior beyond
//! validation and canonical serialization.

pub mod wire;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;
use uuid::Uuid;

use crate::seclevel::SecurityExpr;
use wire::{Canonical, Reader, Writer, WireError};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

fn check_ident(field: &'static str, s: &str) -> Result<(), ValidationError> {
    if s.is_empty() {
        return Err(ValidationError::new(field, "must not be empty"));
    }
    if !s.is_ascii() || s.chars().any(|c| c.is_whitespace()) {
        return Err(ValidationError::new(
            field,
            "must be ASCII without whitespace",
        ));
    }
    Ok(())
}

/// A node within an administrative domain, e.g. `redimadrid/sansa`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    domain: String,
    name: String,
}

impl NodeId {
    pub fn new(domain: impl Into<String>, name: impl Into<String>) -> Result<Self, ValidationError> {
        let domain = domain.into();
        let name = name.into();
        check_ident("domain", &domain)?;
        check_ident("name", &name)?;
        if domain.contains('/') || name.contains('/') {
            return Err(ValidationError::new("node", "'/' is reserved as separator"));
        }
        Ok(Self { domain, name })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.domain, self.name)
    }
}

impl FromStr for NodeId {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (domain, name) = s
            .split_once('/')
            .ok_or_else(|| ValidationError::new("node", "expected <domain>/<name>"))?;
        NodeId::new(domain, name)
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! id128 {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(Uuid);

        impl $name {
            /// Fresh random identifier (version-4 style) from the given RNG.
            pub fn random(rng: &mut impl rand::RngCore) -> Self {
                let mut b = [0u8; 16];
                rng.fill_bytes(&mut b);
                Self(uuid::Builder::from_random_bytes(b).into_uuid())
            }

            pub fn from_bytes(b: [u8; 16]) -> Self {
                Self(Uuid::from_bytes(b))
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                self.0.as_bytes()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                // Canonical rendering: lowercase hyphenated hex.
                write!(f, "{}", self.0.hyphenated())
            }
        }

        impl FromStr for $name {
            type Err = ValidationError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s)
                    .map(Self)
                    .map_err(|e| ValidationError::new("id", e.to_string()))
            }
        }

        impl Canonical for $name {
            fn encode_into(&self, w: &mut Writer) {
                w.put_raw(self.0.as_bytes());
            }

            fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
                let raw: [u8; 16] = r.take(16)?.try_into().unwrap();
                Ok(Self::from_bytes(raw))
            }
        }
    };
}

id128!(KeyId, "128-bit key identifier; doubles as RNDID and KEYID.");
id128!(LinkId, "128-bit link identifier.");

/// Raw symmetric key bytes, 16 to 4096 octets.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyMaterial {
    bytes: Vec<u8>,
}

pub const MIN_KEY_LEN: usize = 16;
pub const MAX_KEY_LEN: usize = 4096;
/// Matches AES-256 consumption; links default to 32-byte keys.
pub const DEFAULT_KEY_LEN: usize = 32;

impl KeyMaterial {
    pub fn new(bytes: Vec<u8>) -> Result<Self, ValidationError> {
        if bytes.len() < MIN_KEY_LEN || bytes.len() > MAX_KEY_LEN {
            return Err(ValidationError::new(
                "key_material",
                format!("length {} outside [{MIN_KEY_LEN}, {MAX_KEY_LEN}]", bytes.len()),
            ));
        }
        Ok(Self { bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= MIN_KEY_LEN by construction
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0u8; len]).expect("length in range")
    }

    /// Surrender the raw bytes, e.g. to overwrite them after use.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Key bytes stay out of logs.
        write!(f, "KeyMaterial({} bytes)", self.bytes.len())
    }
}

impl Serialize for KeyMaterial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.bytes))
    }
}

/// Seconds since the simulation epoch, start < end; keys are served
/// while `start <= t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ValidityWindow {
    pub start_s: u64,
    pub end_s: u64,
}

impl ValidityWindow {
    pub fn new(start_s: u64, end_s: u64) -> Result<Self, ValidationError> {
        if start_s >= end_s {
            return Err(ValidationError::new(
                "validity",
                format!("start {start_s} must precede end {end_s}"),
            ));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn contains(&self, t_s: u64) -> bool {
        self.start_s <= t_s && t_s < self.end_s
    }
}

/// A shared symmetric key with identity, provenance, and security label —
/// the unit everything in the system moves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyEntry {
    pub key_id: KeyId,
    pub key: KeyMaterial,
    pub peer: NodeId,
    pub supplier_id: String,
    pub validity: ValidityWindow,
    pub label: SecurityExpr,
}

impl KeyEntry {
    pub fn new(
        key_id: KeyId,
        key: KeyMaterial,
        peer: NodeId,
        supplier_id: impl Into<String>,
        validity: ValidityWindow,
        label: SecurityExpr,
    ) -> Result<Self, ValidationError> {
        let supplier_id = supplier_id.into();
        if supplier_id.is_empty() {
            return Err(ValidationError::new("supplier_id", "must not be empty"));
        }
        Ok(Self {
            key_id,
            key,
            peer,
            supplier_id,
            validity,
            label,
        })
    }
}

/// Key-generating link technology, as carried in the extended
/// controller interface ("link type" property).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkType {
    Qkd,
    Pqc,
    Raw,
    Other,
}

impl LinkType {
    fn wire_code(self) -> u8 {
        match self {
            LinkType::Qkd => 0,
            LinkType::Pqc => 1,
            LinkType::Raw => 2,
            LinkType::Other => 3,
        }
    }

    fn from_wire(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(LinkType::Qkd),
            1 => Ok(LinkType::Pqc),
            2 => Ok(LinkType::Raw),
            3 => Ok(LinkType::Other),
            other => Err(WireError::invalid(
                "link_type",
                format!("unknown code {other}"),
            )),
        }
    }
}

/// A point-to-point key-generating link with QoS targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkDescriptor {
    pub link_id: LinkId,
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub link_type: LinkType,
    pub qos_rate_bps: u64,
    pub qos_key_len: u32,
}

impl LinkDescriptor {
    pub fn new(
        link_id: LinkId,
        endpoint_a: NodeId,
        endpoint_b: NodeId,
        link_type: LinkType,
        qos_rate_bps: u64,
        qos_key_len: u32,
    ) -> Result<Self, ValidationError> {
        if endpoint_a == endpoint_b {
            return Err(ValidationError::new("endpoints", "must differ"));
        }
        if qos_rate_bps == 0 {
            return Err(ValidationError::new("qos_rate_bps", "must be positive"));
        }
        // At least one key per hour.
        if qos_rate_bps.saturating_mul(3600) < 8 * u64::from(qos_key_len) {
            return Err(ValidationError::new(
                "qos_rate_bps",
                "below one key per hour for the configured key length",
            ));
        }
        if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&(qos_key_len as usize)) {
            return Err(ValidationError::new(
                "qos_key_len",
                format!("outside [{MIN_KEY_LEN}, {MAX_KEY_LEN}]"),
            ));
        }
        Ok(Self {
            link_id,
            endpoint_a,
            endpoint_b,
            link_type,
            qos_rate_bps,
            qos_key_len,
        })
    }

    pub fn other_endpoint(&self, node: &NodeId) -> Option<&NodeId> {
        if *node == self.endpoint_a {
            Some(&self.endpoint_b)
        } else if *node == self.endpoint_b {
            Some(&self.endpoint_a)
        } else {
            None
        }
    }

    pub fn connects(&self, a: &NodeId, b: &NodeId) -> bool {
        (self.endpoint_a == *a && self.endpoint_b == *b)
            || (self.endpoint_a == *b && self.endpoint_b == *a)
    }
}

/// An ordered relay chain, possibly through border nodes. Index `i` in
/// `border_crossings` marks the hop pair `(hops[i], hops[i+1])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathSpec {
    pub hops: Vec<NodeId>,
    pub links: Vec<LinkId>,
    pub border_crossings: BTreeSet<u32>,
}

impl PathSpec {
    pub fn new(
        hops: Vec<NodeId>,
        links: Vec<LinkId>,
        border_crossings: BTreeSet<u32>,
    ) -> Result<Self, ValidationError> {
        if hops.len() < 2 {
            return Err(ValidationError::new("hops", "need at least two"));
        }
        if links.len() != hops.len() - 1 {
            return Err(ValidationError::new(
                "links",
                format!("expected {} links for {} hops", hops.len() - 1, hops.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        if !hops.iter().all(|h| seen.insert(h.clone())) {
            return Err(ValidationError::new("hops", "must be pairwise distinct"));
        }
        if let Some(i) = border_crossings.iter().find(|&&i| i as usize >= links.len()) {
            return Err(ValidationError::new(
                "border_crossings",
                format!("index {i} beyond last hop pair"),
            ));
        }
        Ok(Self {
            hops,
            links,
            border_crossings,
        })
    }

    /// Full consistency check against known link descriptors: every
    /// consecutive hop pair must be the endpoints of its link.
    pub fn validate_against(
        &self,
        topology: &BTreeMap<LinkId, LinkDescriptor>,
    ) -> Result<(), ValidationError> {
        for (i, link_id) in self.links.iter().enumerate() {
            if self.border_crossings.contains(&(i as u32)) {
                continue; // crossing hops are bridged, not linked
            }
            let link = topology.get(link_id).ok_or_else(|| {
                ValidationError::new("links", format!("unknown link {link_id}"))
            })?;
            if !link.connects(&self.hops[i], &self.hops[i + 1]) {
                return Err(ValidationError::new(
                    "links",
                    format!("link {link_id} does not connect hops {i} and {}", i + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn hop_count(&self) -> usize {
        self.links.len()
    }
}

// --- canonical encodings, field order fixed by declaration order ---

impl Canonical for NodeId {
    fn encode_into(&self, w: &mut Writer) {
        w.put_str(&self.domain);
        w.put_str(&self.name);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let domain = r.string("domain")?;
        let name = r.string("name")?;
        NodeId::new(domain, name).map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

impl Canonical for KeyMaterial {
    fn encode_into(&self, w: &mut Writer) {
        w.put_octets(&self.bytes);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let raw = r.octets("key_material")?;
        KeyMaterial::new(raw.to_vec()).map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

impl Canonical for ValidityWindow {
    fn encode_into(&self, w: &mut Writer) {
        w.put_u64(self.start_s);
        w.put_u64(self.end_s);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let start_s = r.u64()?;
        let end_s = r.u64()?;
        ValidityWindow::new(start_s, end_s).map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

impl Canonical for KeyEntry {
    fn encode_into(&self, w: &mut Writer) {
        self.key_id.encode_into(w);
        self.key.encode_into(w);
        self.peer.encode_into(w);
        w.put_str(&self.supplier_id);
        self.validity.encode_into(w);
        self.label.encode_into(w);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let key_id = KeyId::decode_from(r)?;
        let key = KeyMaterial::decode_from(r)?;
        let peer = NodeId::decode_from(r)?;
        let supplier_id = r.string("supplier_id")?;
        let validity = ValidityWindow::decode_from(r)?;
        let label = SecurityExpr::decode_from(r)?;
        KeyEntry::new(key_id, key, peer, supplier_id, validity, label)
            .map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

impl Canonical for LinkDescriptor {
    fn encode_into(&self, w: &mut Writer) {
        self.link_id.encode_into(w);
        self.endpoint_a.encode_into(w);
        self.endpoint_b.encode_into(w);
        w.put_u8(self.link_type.wire_code());
        w.put_u64(self.qos_rate_bps);
        w.put_u32(self.qos_key_len);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let link_id = LinkId::decode_from(r)?;
        let endpoint_a = NodeId::decode_from(r)?;
        let endpoint_b = NodeId::decode_from(r)?;
        let link_type = LinkType::from_wire(r.u8()?)?;
        let qos_rate_bps = r.u64()?;
        let qos_key_len = r.u32()?;
        LinkDescriptor::new(
            link_id,
            endpoint_a,
            endpoint_b,
            link_type,
            qos_rate_bps,
            qos_key_len,
        )
        .map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

impl Canonical for PathSpec {
    fn encode_into(&self, w: &mut Writer) {
        w.put_u32(self.hops.len() as u32);
        for h in &self.hops {
            h.encode_into(w);
        }
        w.put_u32(self.links.len() as u32);
        for l in &self.links {
            l.encode_into(w);
        }
        w.put_u32(self.border_crossings.len() as u32);
        for i in &self.border_crossings {
            w.put_u32(*i);
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let n_hops = r.count("hops", 10)?;
        let mut hops = Vec::new();
        for _ in 0..n_hops {
            hops.push(NodeId::decode_from(r)?);
        }
        let n_links = r.count("links", 16)?;
        let mut links = Vec::new();
        for _ in 0..n_links {
            links.push(LinkId::decode_from(r)?);
        }
        let n_cross = r.count("border_crossings", 4)?;
        let mut border_crossings = BTreeSet::new();
        for _ in 0..n_cross {
            border_crossings.insert(r.u32()?);
        }
        PathSpec::new(hops, links, border_crossings).map_err(|e| WireError::invalid(e.field, e.reason))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seclevel::SecurityLabel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(7)
    }

    pub(crate) fn sample_entry(rng: &mut ChaCha12Rng) -> KeyEntry {
        let mut key = vec![0u8; 32];
        rand::RngCore::fill_bytes(rng, &mut key);
        KeyEntry::new(
            KeyId::random(rng),
            KeyMaterial::new(key).unwrap(),
            NodeId::new("berlin", "hodor").unwrap(),
            "link:test",
            ValidityWindow::new(10, 3610).unwrap(),
            SecurityExpr::atom(SecurityLabel::its(["det"])),
        )
        .unwrap()
    }

    #[test]
    fn node_id_rejects_whitespace_and_empty() {
        assert!(NodeId::new("a b", "n").is_err());
        assert!(NodeId::new("", "n").is_err());
        assert!(NodeId::new("dom", "naïve").is_err());
        assert!(NodeId::new("dom", "node").is_ok());
    }

    #[test]
    fn key_id_renders_as_lowercase_uuid() {
        let id = KeyId::from_bytes([0xAB; 16]);
        assert_eq!(id.to_string(), "abababab-abab-abab-abab-abababababab");
    }

    #[test]
    fn key_material_length_bounds() {
        assert!(KeyMaterial::new(vec![0; 15]).is_err());
        assert!(KeyMaterial::new(vec![0; 16]).is_ok());
        assert!(KeyMaterial::new(vec![0; 4096]).is_ok());
        assert!(KeyMaterial::new(vec![0; 4097]).is_err());
    }

    #[test]
    fn validity_rejects_inverted_window() {
        let err = ValidityWindow::new(5, 5).unwrap_err();
        assert_eq!(err.field, "validity");
    }

    #[test]
    fn entry_roundtrip_is_fixpoint() {
        let entry = sample_entry(&mut rng());
        let bytes = entry.canonical_bytes();
        let decoded = KeyEntry::decode(&bytes).unwrap();
        assert_eq!(decoded, entry);
        assert_eq!(decoded.canonical_bytes(), bytes);
    }

    #[test]
    fn link_descriptor_validation() {
        let a = NodeId::new("d", "a").unwrap();
        let b = NodeId::new("d", "b").unwrap();
        let id = LinkId::from_bytes([1; 16]);
        assert!(LinkDescriptor::new(id, a.clone(), a.clone(), LinkType::Qkd, 256, 32).is_err());
        // 1 bps * 3600 s = 3600 bits/hour >= 256 bits per key: ok
        assert!(LinkDescriptor::new(id, a.clone(), b.clone(), LinkType::Qkd, 1, 32).is_ok());
        // key of 4096 bytes needs 32768 bits/hour > 3600
        assert!(LinkDescriptor::new(id, a, b, LinkType::Qkd, 1, 4096).is_err());
    }

    #[test]
    fn path_spec_rejects_cycles() {
        let a = NodeId::new("d", "a").unwrap();
        let b = NodeId::new("d", "b").unwrap();
        let l = LinkId::from_bytes([2; 16]);
        let err = PathSpec::new(
            vec![a.clone(), b, a.clone()],
            vec![l, l],
            BTreeSet::new(),
        )
        .unwrap_err();
        assert_eq!(err.field, "hops");
    }

    #[test]
    fn construction_order_does_not_change_bytes() {
        // Same logical value assembled twice, tag sets in different
        // insertion orders.
        let mk = |tags: Vec<&str>| {
            KeyEntry::new(
                KeyId::from_bytes([9; 16]),
                KeyMaterial::zeros(32),
                NodeId::new("d", "n").unwrap(),
                "s",
                ValidityWindow::new(0, 1).unwrap(),
                SecurityExpr::atom(SecurityLabel::its(tags)),
            )
            .unwrap()
        };
        assert_eq!(
            mk(vec!["x", "y"]).canonical_bytes(),
            mk(vec!["y", "x"]).canonical_bytes()
        );
    }
}
