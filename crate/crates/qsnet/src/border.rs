//! The four border-node interconnection methods, implemented as
//! interchangeable bridge strategies between two domains' border nodes.
//!
//! Methods 1 and 2 pair keys from two independent suppliers into a
//! hybrid bridge stream (XOR, label algebra from `seclevel`). Method 3
//! dual-encrypts the same random number under two KEM suites with a
//! mandatory cross-check on receipt; it runs on the shared exchange
//! engine in `qkd_emu`. Method 4 sends two different random numbers
//! over two disjoint paths and combines them with a KDF, matching
//! halves by identifier in a TTL'd queue.
//!
//! A broken suite can only deny service here, never inject a key: a
//! package is dropped unless every signature verifies and, in
//! cross-check mode, every suite recovers the same payload.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use thiserror::Error;

use crate::core::wire::{Canonical, Reader, Writer, WireError};
use crate::core::{KeyEntry, KeyId, KeyMaterial, NodeId, ValidityWindow};
use crate::crypto::{
    self, expand_secret, CryptoError, Kdf, KemPublicKey, KemSecretKey, Psk, SigPublicKey,
    SigSecretKey, SuiteRegistry,
};
use crate::kms::{KeyStore, KmsError};
use crate::node::messages::{M4Body, NetMessage};
use crate::node::{Ctx, Port, TimerTag};
use crate::seclevel::SecurityExpr;

/// Which route a package travelled. `Single` for the one-path methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathId {
    Ground,
    Space,
    Single,
}

impl PathId {
    pub fn wire_code(self) -> u8 {
        match self {
            PathId::Ground => 0,
            PathId::Space => 1,
            PathId::Single => 2,
        }
    }

    pub fn from_wire(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(PathId::Ground),
            1 => Ok(PathId::Space),
            2 => Ok(PathId::Single),
            other => Err(WireError::invalid(
                "path_id",
                format!("unknown code {other}"),
            )),
        }
    }
}

/// One encapsulation: which KEM suite, its ciphertext, and the payload
/// masked with the encapsulated secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageCiphertext {
    pub kem_suite: String,
    pub ciphertext: Vec<u8>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageMeta {
    pub sender: NodeId,
    pub validity: ValidityWindow,
    pub path: PathId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageSignature {
    pub sig_suite: String,
    pub signature: Vec<u8>,
}

/// The signed, serialized wire unit carrying encapsulated random
/// material between border nodes. Signatures cover the canonical
/// serialization of everything except the signatures themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPackage {
    pub rnd_id: KeyId,
    pub ciphertexts: Vec<PackageCiphertext>,
    pub meta: PackageMeta,
    pub signatures: Vec<PackageSignature>,
}

impl KeyPackage {
    /// The byte string the signatures are computed over.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_body(&mut w);
        w.into_bytes()
    }

    fn encode_body(&self, w: &mut Writer) {
        self.rnd_id.encode_into(w);
        w.put_u32(self.ciphertexts.len() as u32);
        for c in &self.ciphertexts {
            w.put_str(&c.kem_suite);
            w.put_octets(&c.ciphertext);
            w.put_octets(&c.payload);
        }
        self.meta.sender.encode_into(w);
        self.meta.validity.encode_into(w);
        w.put_u8(self.meta.path.wire_code());
    }
}

impl Canonical for KeyPackage {
    fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.put_u32(self.signatures.len() as u32);
        for s in &self.signatures {
            w.put_str(&s.sig_suite);
            w.put_octets(&s.signature);
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let rnd_id = KeyId::decode_from(r)?;
        let n_ct = r.count("ciphertexts", 12)?;
        if n_ct == 0 {
            return Err(WireError::invalid("ciphertexts", "must not be empty"));
        }
        let mut ciphertexts = Vec::new();
        for _ in 0..n_ct {
            ciphertexts.push(PackageCiphertext {
                kem_suite: r.string("kem_suite")?,
                ciphertext: r.octets("ciphertext")?.to_vec(),
                payload: r.octets("payload")?.to_vec(),
            });
        }
        let sender = NodeId::decode_from(r)?;
        let validity = ValidityWindow::decode_from(r)?;
        let path = PathId::from_wire(r.u8()?)?;
        let n_sig = r.count("signatures", 8)?;
        if n_sig == 0 {
            return Err(WireError::invalid("signatures", "must not be empty"));
        }
        let mut signatures = Vec::new();
        for _ in 0..n_sig {
            signatures.push(PackageSignature {
                sig_suite: r.string("sig_suite")?,
                signature: r.octets("signature")?.to_vec(),
            });
        }
        Ok(Self {
            rnd_id,
            ciphertexts,
            meta: PackageMeta {
                sender,
                validity,
                path,
            },
            signatures,
        })
    }
}

/// How the payload is carried across multiple suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadMode {
    /// The same payload encrypted independently under every suite;
    /// receivers require all recoveries to agree. One broken KEM can
    /// deny service but cannot inject.
    #[default]
    CrossCheck,
    /// One payload masked with the XOR of all suite keystreams.
    XorMask,
}

/// Sender-side material for one suite pair.
#[derive(Debug, Clone)]
pub struct SendSuite {
    pub kem: String,
    pub sig: String,
    pub peer_kem_pk: KemPublicKey,
    pub sig_sk: SigSecretKey,
}

/// Receiver-side material for one suite pair.
#[derive(Debug, Clone)]
pub struct RecvSuite {
    pub kem: String,
    pub sig: String,
    pub kem_sk: KemSecretKey,
    pub peer_sig_pk: SigPublicKey,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackageError {
    #[error("package names suite '{got}' where '{want}' was expected")]
    SuiteMismatch { want: String, got: String },
    #[error("expected {want} ciphertext entries, found {got}")]
    CiphertextCount { want: usize, got: usize },
    #[error("expected {want} signatures, found {got}")]
    SignatureCount { want: usize, got: usize },
    #[error("signature by suite '{0}' does not verify")]
    SignatureInvalid(String),
    #[error("payload length {got}, expected {want}")]
    PayloadLength { want: usize, got: usize },
    #[error("recovered payloads disagree across suites")]
    CrossCheckMismatch,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Encapsulate, mask and sign one payload under the given suites.
pub fn build_package(
    registry: &SuiteRegistry,
    rng: &mut impl rand::RngCore,
    rnd_id: KeyId,
    payload: &[u8],
    meta: PackageMeta,
    suites: &[SendSuite],
    mode: PayloadMode,
) -> Result<KeyPackage, CryptoError> {
    assert!(!suites.is_empty());
    let mut ciphertexts = Vec::with_capacity(suites.len());
    let mut combined_mask = vec![0u8; payload.len()];
    let mut raw_cts = Vec::with_capacity(suites.len());
    for s in suites {
        let suite = registry.kem(&s.kem)?;
        let (ct, ss) = crypto::kem_encap(suite, &s.peer_kem_pk, rng)?;
        let mask = expand_secret(&ss, payload.len());
        match mode {
            PayloadMode::CrossCheck => {
                let masked: Vec<u8> = payload.iter().zip(&mask).map(|(p, m)| p ^ m).collect();
                ciphertexts.push(PackageCiphertext {
                    kem_suite: s.kem.clone(),
                    ciphertext: ct,
                    payload: masked,
                });
            }
            PayloadMode::XorMask => {
                for (c, m) in combined_mask.iter_mut().zip(&mask) {
                    *c ^= m;
                }
                raw_cts.push(ct);
            }
        }
    }
    if mode == PayloadMode::XorMask {
        for (i, ct) in raw_cts.into_iter().enumerate() {
            let payload_bytes = if i == 0 {
                payload
                    .iter()
                    .zip(&combined_mask)
                    .map(|(p, m)| p ^ m)
                    .collect()
            } else {
                Vec::new()
            };
            ciphertexts.push(PackageCiphertext {
                kem_suite: suites[i].kem.clone(),
                ciphertext: ct,
                payload: payload_bytes,
            });
        }
    }
    let mut package = KeyPackage {
        rnd_id,
        ciphertexts,
        meta,
        signatures: Vec::new(),
    };
    let body = package.signing_bytes();
    for s in suites {
        let suite = registry.sig(&s.sig)?;
        package.signatures.push(PackageSignature {
            sig_suite: s.sig.clone(),
            signature: crypto::sign(suite, &s.sig_sk, &body)?,
        });
    }
    Ok(package)
}

/// Verify every signature, decapsulate every suite, and recover the
/// payload. Nothing about the package is trusted before the signatures
/// check out.
pub fn open_package(
    registry: &SuiteRegistry,
    package: &KeyPackage,
    suites: &[RecvSuite],
    mode: PayloadMode,
    expected_len: usize,
) -> Result<Vec<u8>, PackageError> {
    if package.ciphertexts.len() != suites.len() {
        return Err(PackageError::CiphertextCount {
            want: suites.len(),
            got: package.ciphertexts.len(),
        });
    }
    if package.signatures.len() != suites.len() {
        return Err(PackageError::SignatureCount {
            want: suites.len(),
            got: package.signatures.len(),
        });
    }
    for (s, ct) in suites.iter().zip(&package.ciphertexts) {
        if ct.kem_suite != s.kem {
            return Err(PackageError::SuiteMismatch {
                want: s.kem.clone(),
                got: ct.kem_suite.clone(),
            });
        }
    }
    // Signatures first; no payload processing on unauthenticated bytes.
    let body = package.signing_bytes();
    for (s, sig) in suites.iter().zip(&package.signatures) {
        if sig.sig_suite != s.sig {
            return Err(PackageError::SuiteMismatch {
                want: s.sig.clone(),
                got: sig.sig_suite.clone(),
            });
        }
        let suite = registry.sig(&s.sig)?;
        if !crypto::verify(suite, &s.peer_sig_pk, &body, &sig.signature)? {
            return Err(PackageError::SignatureInvalid(s.sig.clone()));
        }
    }
    match mode {
        PayloadMode::CrossCheck => {
            let mut recovered: Option<Vec<u8>> = None;
            for (s, ct) in suites.iter().zip(&package.ciphertexts) {
                if ct.payload.len() != expected_len {
                    return Err(PackageError::PayloadLength {
                        want: expected_len,
                        got: ct.payload.len(),
                    });
                }
                let suite = registry.kem(&s.kem)?;
                let ss = crypto::kem_decap(suite, &s.kem_sk, &ct.ciphertext)?;
                log::debug!("key confirmation {}", crypto::confirm_tag(&ss));
                let mask = expand_secret(&ss, expected_len);
                let rnd: Vec<u8> = ct.payload.iter().zip(&mask).map(|(p, m)| p ^ m).collect();
                match &recovered {
                    None => recovered = Some(rnd),
                    // The cross-check: every suite must recover the same
                    // payload or the package is treated as hostile.
                    Some(prev) if *prev != rnd => {
                        return Err(PackageError::CrossCheckMismatch);
                    }
                    Some(_) => {}
                }
            }
            Ok(recovered.expect("at least one suite"))
        }
        PayloadMode::XorMask => {
            let masked = &package.ciphertexts[0].payload;
            if masked.len() != expected_len {
                return Err(PackageError::PayloadLength {
                    want: expected_len,
                    got: masked.len(),
                });
            }
            for (i, ct) in package.ciphertexts.iter().enumerate() {
                if i > 0 && !ct.payload.is_empty() {
                    return Err(PackageError::PayloadLength {
                        want: 0,
                        got: ct.payload.len(),
                    });
                }
            }
            let mut rnd = masked.clone();
            for (s, ct) in suites.iter().zip(&package.ciphertexts) {
                let suite = registry.kem(&s.kem)?;
                let ss = crypto::kem_decap(suite, &s.kem_sk, &ct.ciphertext)?;
                for (r_b, m) in rnd.iter_mut().zip(expand_secret(&ss, expected_len)) {
                    *r_b ^= m;
                }
            }
            Ok(rnd)
        }
    }
}

// --- methods 1 and 2: link-based bridges ---

/// Continuous pairing of two supplier streams into a hybrid bridge
/// stream at one border node. Both border nodes run the same bridge
/// over identical stores, producing identical hybrid entries.
#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub pair: String,
    pub peer: NodeId,
    pub inputs: Vec<String>,
    pub tick: Duration,
    pub metric_prefix: String,
}

#[derive(Debug)]
pub struct Bridge {
    pub cfg: BridgeConfig,
}

impl Bridge {
    pub fn new(cfg: BridgeConfig) -> Self {
        Self { cfg }
    }

    pub fn start(&self, ctx: &mut Ctx) {
        ctx.set_timer(self.cfg.tick, TimerTag::BridgeTick(self.cfg.pair.clone()));
    }

    /// Pair as many keys as both inputs allow. A starved input stalls
    /// the bridge; it never degrades to a single supplier.
    pub fn on_tick(&mut self, ctx: &mut Ctx, kms: &mut KeyStore) {
        ctx.set_timer(self.cfg.tick, TimerTag::BridgeTick(self.cfg.pair.clone()));
        loop {
            match kms.hybridize_stores(&self.cfg.peer, &self.cfg.inputs, ctx.now_s()) {
                Ok(_) => {
                    ctx.inc(&format!("{}.produced", self.cfg.metric_prefix));
                    ctx.mark(&format!("{}.produced", self.cfg.metric_prefix), 1);
                }
                Err(KmsError::SupplierStarved(_)) => break,
                Err(e) => {
                    ctx.inc(&format!("{}.error", self.cfg.metric_prefix));
                    log::warn!("bridge {}: {e}", self.cfg.pair);
                    break;
                }
            }
        }
    }
}

/// The supplier id a bridge publishes, identical at both endpoints.
pub fn bridge_supplier_id(inputs: &[String]) -> String {
    let mut sorted: Vec<&str> = inputs.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    sorted.dedup();
    format!("hybrid:{}", sorted.join("+"))
}

// --- method 4: multipath diversity ---

#[derive(Debug, Clone)]
pub struct M4PathConfig {
    pub suite: SendSuite,
    pub port: Port,
}

#[derive(Debug, Clone)]
pub struct M4RecvPathConfig {
    pub suite: RecvSuite,
    pub port: Port,
}

#[derive(Debug, Clone)]
pub struct M4Config {
    pub pair: String,
    pub peer: NodeId,
    pub supplier_id: String,
    pub key_len: u32,
    pub block_size: u32,
    pub block_interval: Duration,
    pub ttl: Duration,
    pub ack_timeout: Duration,
    pub psk: Psk,
    pub kdf: Kdf,
    pub validity: Duration,
    pub label: SecurityExpr,
    pub metric_prefix: String,
}

#[derive(Debug)]
struct M4Pending {
    entry: KeyEntry,
    space_acked: bool,
    ground_acked: bool,
    sent_at: crate::netsim::SimTime,
}

/// Client side: emits blocks of paired random numbers, one package per
/// path, and commits the KDF-combined key once both paths acknowledged
/// verification of their halves.
#[derive(Debug)]
pub struct M4Sender {
    pub cfg: M4Config,
    space: M4PathConfig,
    ground: M4PathConfig,
    seqs: BTreeMap<PathId, u64>,
    outstanding: BTreeMap<(PathId, u64), Vec<KeyId>>,
    pending: BTreeMap<KeyId, M4Pending>,
    lost_since_sync: BTreeSet<KeyId>,
    in_backoff: bool,
    backoff_attempt: u32,
}

impl M4Sender {
    pub fn new(cfg: M4Config, space: M4PathConfig, ground: M4PathConfig) -> Self {
        Self {
            cfg,
            space,
            ground,
            seqs: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            pending: BTreeMap::new(),
            lost_since_sync: BTreeSet::new(),
            in_backoff: false,
            backoff_attempt: 0,
        }
    }

    pub fn start(&self, ctx: &mut Ctx) {
        ctx.set_timer(
            self.cfg.block_interval,
            TimerTag::M4BlockTick(self.cfg.pair.clone()),
        );
        ctx.set_timer(self.sweep_period(), TimerTag::M4Sweep(self.cfg.pair.clone()));
    }

    fn sweep_period(&self) -> Duration {
        (self.cfg.ttl / 4).max(Duration::from_millis(500))
    }

    fn metric(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.cfg.metric_prefix)
    }

    pub fn on_block_tick(&mut self, ctx: &mut Ctx, kms: &mut KeyStore) {
        ctx.set_timer(
            self.cfg.block_interval,
            TimerTag::M4BlockTick(self.cfg.pair.clone()),
        );
        if self.in_backoff {
            return;
        }
        let len = self.cfg.key_len as usize;
        let now_s = ctx.now_s();
        let validity =
            ValidityWindow::new(now_s, now_s + self.cfg.validity.as_secs().max(1)).expect("window");
        let mut space_pkgs = Vec::with_capacity(self.cfg.block_size as usize);
        let mut ground_pkgs = Vec::with_capacity(self.cfg.block_size as usize);
        let mut ids = Vec::with_capacity(self.cfg.block_size as usize);
        for _ in 0..self.cfg.block_size {
            // Two random numbers, one shared identifier.
            let rnd_id = KeyId::random(ctx.rng);
            let mut rnd1 = vec![0u8; len];
            let mut rnd2 = vec![0u8; len];
            rand::RngCore::fill_bytes(ctx.rng, &mut rnd1);
            rand::RngCore::fill_bytes(ctx.rng, &mut rnd2);
            let mk_meta = |path| PackageMeta {
                sender: kms.node().clone(),
                validity,
                path,
            };
            let space_pkg = build_package(
                ctx.registry,
                ctx.rng,
                rnd_id,
                &rnd1,
                mk_meta(PathId::Space),
                std::slice::from_ref(&self.space.suite),
                PayloadMode::CrossCheck,
            )
            .expect("package build");
            let ground_pkg = build_package(
                ctx.registry,
                ctx.rng,
                rnd_id,
                &rnd2,
                mk_meta(PathId::Ground),
                std::slice::from_ref(&self.ground.suite),
                PayloadMode::CrossCheck,
            )
            .expect("package build");
            let key = crypto::kdf_combine(
                self.cfg.kdf,
                &KeyMaterial::new(rnd1).expect("length"),
                &KeyMaterial::new(rnd2).expect("length"),
                &self.cfg.psk,
            )
            .expect("kdf");
            // KEYID is set identical to the RNDID.
            let entry = KeyEntry::new(
                rnd_id,
                key,
                self.cfg.peer.clone(),
                &self.cfg.supplier_id,
                validity,
                self.cfg.label.clone(),
            )
            .expect("entry");
            self.pending.insert(rnd_id, M4Pending {
                entry,
                space_acked: false,
                ground_acked: false,
                sent_at: ctx.now,
            });
            ids.push(rnd_id);
            space_pkgs.push(space_pkg);
            ground_pkgs.push(ground_pkg);
            ctx.inc(&self.metric("sent"));
        }
        for (path, port, packages) in [
            (PathId::Space, self.space.port, space_pkgs),
            (PathId::Ground, self.ground.port, ground_pkgs),
        ] {
            let seq = self.seqs.entry(path).or_insert(0);
            *seq += 1;
            let seq = *seq;
            self.outstanding.insert((path, seq), ids.clone());
            ctx.send(port, &NetMessage::M4 {
                pair: self.cfg.pair.clone(),
                body: M4Body::Block {
                    seq,
                    path,
                    packages,
                },
            });
            ctx.set_timer(
                self.cfg.ack_timeout,
                TimerTag::M4AckTimeout(self.cfg.pair.clone(), path, seq),
            );
        }
    }

    pub fn on_block_ack(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        seq: u64,
        path: PathId,
        verified: &[KeyId],
    ) {
        self.outstanding.remove(&(path, seq));
        for id in verified {
            let Some(p) = self.pending.get_mut(id) else {
                continue;
            };
            match path {
                PathId::Space => p.space_acked = true,
                PathId::Ground => p.ground_acked = true,
                PathId::Single => {}
            }
            if p.space_acked && p.ground_acked {
                // Both halves confirmed verified at the far end: commit.
                let p = self.pending.remove(id).expect("present");
                match kms.push_key(&self.cfg.supplier_id, p.entry) {
                    Ok(_) => {
                        ctx.inc(&self.metric("delivered"));
                        ctx.mark(&self.metric("delivered"), 1);
                    }
                    Err(e) => {
                        ctx.inc(&self.metric("error"));
                        log::warn!("m4 {} sender push: {e}", self.cfg.pair);
                    }
                }
            }
        }
    }

    pub fn on_ack_timeout(&mut self, ctx: &mut Ctx, path: PathId, seq: u64) {
        if self.outstanding.remove(&(path, seq)).is_none() {
            return; // acked in time
        }
        ctx.inc(&self.metric("block_timeout"));
        if !self.in_backoff {
            self.in_backoff = true;
            self.backoff_attempt = 0;
            self.schedule_resume(ctx);
        }
    }

    fn schedule_resume(&mut self, ctx: &mut Ctx) {
        let delay =
            Duration::from_secs(1 << self.backoff_attempt.min(6)).min(Duration::from_secs(60));
        self.backoff_attempt += 1;
        ctx.set_timer(delay, TimerTag::M4Resume(self.cfg.pair.clone()));
    }

    pub fn on_resume(&mut self, ctx: &mut Ctx) {
        if !self.in_backoff {
            return;
        }
        let recoverable: Vec<KeyId> = self.pending.keys().copied().collect();
        let dead: Vec<KeyId> = self.lost_since_sync.iter().copied().collect();
        let msg = NetMessage::M4 {
            pair: self.cfg.pair.clone(),
            body: M4Body::SyncReq { recoverable, dead },
        };
        // Either path may be down; whichever lives carries the sync.
        ctx.send(self.space.port, &msg);
        ctx.send(self.ground.port, &msg);
        ctx.inc(&self.metric("sync_attempt"));
        self.schedule_resume(ctx);
    }

    pub fn on_sync_resp(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        stored: &[KeyId],
        revoked: u32,
    ) {
        for id in stored {
            if let Some(p) = self.pending.remove(id) {
                match kms.push_key(&self.cfg.supplier_id, p.entry) {
                    Ok(_) => {
                        ctx.inc(&self.metric("delivered"));
                        ctx.mark(&self.metric("delivered"), 1);
                    }
                    Err(e) => {
                        ctx.inc(&self.metric("error"));
                        log::warn!("m4 {} sync push: {e}", self.cfg.pair);
                    }
                }
            }
        }
        ctx.add(&self.metric("peer_revoked"), u64::from(revoked));
        self.lost_since_sync.clear();
        self.in_backoff = false;
        self.backoff_attempt = 0;
        ctx.inc(&self.metric("sync_done"));
    }

    pub fn on_sweep(&mut self, ctx: &mut Ctx) {
        ctx.set_timer(self.sweep_period(), TimerTag::M4Sweep(self.cfg.pair.clone()));
        let ttl = self.cfg.ttl;
        let expired: Vec<KeyId> = self
            .pending
            .iter()
            .filter(|(_, p)| ctx.now - p.sent_at > ttl)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            self.pending.remove(&id);
            self.lost_since_sync.insert(id);
            ctx.inc(&self.metric("lost"));
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

/// Partial arrivals per identifier, purged after a TTL.
#[derive(Debug)]
pub struct MatchQueue {
    ttl: Duration,
    pending: BTreeMap<KeyId, PendingHalves>,
}

#[derive(Debug)]
pub struct HalfArrival {
    pub rnd: Vec<u8>,
    pub validity: ValidityWindow,
    pub at: crate::netsim::SimTime,
}

#[derive(Debug, Default)]
struct PendingHalves {
    space: Option<HalfArrival>,
    ground: Option<HalfArrival>,
}

#[derive(Debug)]
pub enum MatchOutcome {
    Matched(HalfArrival, HalfArrival),
    Waiting,
    DuplicateHalf,
}

impl MatchQueue {
    pub fn new(ttl: Duration) -> Self {
        Self {
            ttl,
            pending: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, rnd_id: KeyId, path: PathId, half: HalfArrival) -> MatchOutcome {
        let slot = self.pending.entry(rnd_id).or_default();
        let target = match path {
            PathId::Space => &mut slot.space,
            PathId::Ground => &mut slot.ground,
            PathId::Single => return MatchOutcome::DuplicateHalf,
        };
        if target.is_some() {
            return MatchOutcome::DuplicateHalf;
        }
        *target = Some(half);
        if slot.space.is_some() && slot.ground.is_some() {
            let slot = self.pending.remove(&rnd_id).expect("present");
            MatchOutcome::Matched(slot.space.unwrap(), slot.ground.unwrap())
        } else {
            MatchOutcome::Waiting
        }
    }

    /// Remove single-half entries older than the TTL.
    pub fn purge(&mut self, now: crate::netsim::SimTime) -> Vec<KeyId> {
        let ttl = self.ttl;
        let dead: Vec<KeyId> = self
            .pending
            .iter()
            .filter(|(_, halves)| {
                let first = match (&halves.space, &halves.ground) {
                    (Some(h), None) | (None, Some(h)) => h.at,
                    _ => return false,
                };
                now - first > ttl
            })
            .map(|(id, _)| *id)
            .collect();
        for id in &dead {
            self.pending.remove(id);
        }
        dead
    }

    fn purge_id(&mut self, id: KeyId) {
        self.pending.remove(&id);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Server side: verifies per-path packages, queues halves, combines on
/// match and pushes the final key.
#[derive(Debug)]
pub struct M4Receiver {
    pub cfg: M4Config,
    space: M4RecvPathConfig,
    ground: M4RecvPathConfig,
    queue: MatchQueue,
    completed: BTreeSet<KeyId>,
    revoked: BTreeSet<KeyId>,
    seen_blocks: BTreeSet<(PathId, u64)>,
}

impl M4Receiver {
    pub fn new(cfg: M4Config, space: M4RecvPathConfig, ground: M4RecvPathConfig) -> Self {
        let ttl = cfg.ttl;
        Self {
            cfg,
            space,
            ground,
            queue: MatchQueue::new(ttl),
            completed: BTreeSet::new(),
            revoked: BTreeSet::new(),
            seen_blocks: BTreeSet::new(),
        }
    }

    pub fn start(&self, ctx: &mut Ctx) {
        ctx.set_timer(
            (self.cfg.ttl / 4).max(Duration::from_millis(500)),
            TimerTag::M4Sweep(self.cfg.pair.clone()),
        );
    }

    fn metric(&self, suffix: &str) -> String {
        format!("{}.recv.{suffix}", self.cfg.metric_prefix)
    }

    pub fn on_block(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        seq: u64,
        path: PathId,
        packages: &[KeyPackage],
        arrival_port: Port,
    ) {
        let suite = match path {
            PathId::Space => self.space.suite.clone(),
            PathId::Ground => self.ground.suite.clone(),
            PathId::Single => {
                ctx.inc(&self.metric("dos"));
                return;
            }
        };
        if !self.seen_blocks.insert((path, seq)) {
            ctx.inc(&self.metric("replay"));
            return;
        }
        let mut verified = Vec::with_capacity(packages.len());
        for pkg in packages {
            // The channel identifies the sender; the package must name
            // the registered peer, and the signature is authoritative.
            if pkg.meta.sender != self.cfg.peer {
                ctx.inc(&self.metric("unknown_sender"));
                ctx.inc(&self.metric("dos"));
                continue;
            }
            if pkg.meta.path != path {
                ctx.inc(&self.metric("dos"));
                continue;
            }
            let rnd = match open_package(
                ctx.registry,
                pkg,
                std::slice::from_ref(&suite),
                PayloadMode::CrossCheck,
                self.cfg.key_len as usize,
            ) {
                Ok(rnd) => rnd,
                Err(e) => {
                    ctx.inc(&self.metric("dos"));
                    log::debug!("m4 {} {path:?} drop: {e}", self.cfg.pair);
                    continue;
                }
            };
            verified.push(pkg.rnd_id);
            if self.completed.contains(&pkg.rnd_id) || self.revoked.contains(&pkg.rnd_id) {
                // Replay of a settled id: ack again, store nothing twice.
                ctx.inc(&self.metric("replay"));
                continue;
            }
            let half = HalfArrival {
                rnd,
                validity: pkg.meta.validity,
                at: ctx.now,
            };
            match self.queue.insert(pkg.rnd_id, path, half) {
                MatchOutcome::Matched(space_half, ground_half) => {
                    self.combine_and_push(ctx, kms, pkg.rnd_id, space_half, ground_half);
                }
                MatchOutcome::Waiting => {}
                MatchOutcome::DuplicateHalf => {
                    ctx.inc(&self.metric("replay"));
                }
            }
        }
        ctx.send(arrival_port, &NetMessage::M4 {
            pair: self.cfg.pair.clone(),
            body: M4Body::BlockAck {
                seq,
                path,
                verified,
            },
        });
    }

    fn combine_and_push(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        rnd_id: KeyId,
        space_half: HalfArrival,
        ground_half: HalfArrival,
    ) {
        let rnd1 = KeyMaterial::new(space_half.rnd).expect("verified length");
        let rnd2 = KeyMaterial::new(ground_half.rnd).expect("verified length");
        let key = match crypto::kdf_combine(self.cfg.kdf, &rnd1, &rnd2, &self.cfg.psk) {
            Ok(k) => k,
            Err(e) => {
                ctx.inc(&self.metric("error"));
                log::warn!("m4 {} combine: {e}", self.cfg.pair);
                return;
            }
        };
        let start = space_half.validity.start_s.max(ground_half.validity.start_s);
        let end = space_half.validity.end_s.min(ground_half.validity.end_s);
        let Ok(validity) = ValidityWindow::new(start, end) else {
            ctx.inc(&self.metric("error"));
            return;
        };
        let entry = KeyEntry::new(
            rnd_id,
            key,
            self.cfg.peer.clone(),
            &self.cfg.supplier_id,
            validity,
            self.cfg.label.clone(),
        )
        .expect("entry");
        match kms.push_key(&self.cfg.supplier_id, entry) {
            Ok(_) => {
                self.completed.insert(rnd_id);
                ctx.inc(&self.metric("matched"));
                ctx.mark(&self.metric("matched"), 1);
            }
            Err(e) => {
                ctx.inc(&self.metric("error"));
                log::warn!("m4 {} push: {e}", self.cfg.pair);
            }
        }
    }

    pub fn on_sweep(&mut self, ctx: &mut Ctx) {
        ctx.set_timer(
            (self.cfg.ttl / 4).max(Duration::from_millis(500)),
            TimerTag::M4Sweep(self.cfg.pair.clone()),
        );
        let purged = self.queue.purge(ctx.now);
        if !purged.is_empty() {
            ctx.add(&self.metric("purged"), purged.len() as u64);
        }
    }

    pub fn on_sync_req(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        recoverable: &[KeyId],
        dead: &[KeyId],
        arrival_port: Port,
    ) {
        let mut revoked = 0u32;
        for id in dead {
            if self.completed.contains(id)
                && kms.revoke_unconsumed(&self.cfg.peer, &self.cfg.supplier_id, *id)
            {
                self.revoked.insert(*id);
                revoked += 1;
            }
            self.queue.purge_id(*id);
        }
        let stored: Vec<KeyId> = recoverable
            .iter()
            .filter(|id| self.completed.contains(id) && !self.revoked.contains(id))
            .copied()
            .collect();
        ctx.send(arrival_port, &NetMessage::M4 {
            pair: self.cfg.pair.clone(),
            body: M4Body::SyncResp { stored, revoked },
        });
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::SimTime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(77)
    }

    fn meta(path: PathId) -> PackageMeta {
        PackageMeta {
            sender: NodeId::new("berlin", "hodor").unwrap(),
            validity: ValidityWindow::new(0, 3600).unwrap(),
            path,
        }
    }

    fn dual_suites(
        registry: &SuiteRegistry,
        rng: &mut ChaCha12Rng,
    ) -> (Vec<SendSuite>, Vec<RecvSuite>) {
        let mut send = Vec::new();
        let mut recv = Vec::new();
        for (kem, sig) in [("kem-a", "sig-a"), ("kem-b", "sig-b")] {
            let (kem_pk, kem_sk) = crypto::kem_keygen(registry.kem(kem).unwrap(), rng);
            let (sig_pk, sig_sk) = crypto::sig_keygen(registry.sig(sig).unwrap(), rng);
            send.push(SendSuite {
                kem: kem.into(),
                sig: sig.into(),
                peer_kem_pk: kem_pk,
                sig_sk,
            });
            recv.push(RecvSuite {
                kem: kem.into(),
                sig: sig.into(),
                kem_sk,
                peer_sig_pk: sig_pk,
            });
        }
        (send, recv)
    }

    #[test]
    fn package_roundtrip_and_signing_bytes_exclude_signatures() {
        let registry = SuiteRegistry::with_test_suites();
        let mut r = rng();
        let (send, _) = dual_suites(&registry, &mut r);
        let rnd = vec![0xAA; 32];
        let pkg = build_package(
            &registry,
            &mut r,
            KeyId::from_bytes([1; 16]),
            &rnd,
            meta(PathId::Single),
            &send,
            PayloadMode::CrossCheck,
        )
        .unwrap();
        let bytes = pkg.canonical_bytes();
        let decoded = KeyPackage::decode(&bytes).unwrap();
        assert_eq!(decoded, pkg);

        let mut resigned = pkg.clone();
        resigned.signatures[0].signature[0] ^= 0xFF;
        assert_eq!(resigned.signing_bytes(), pkg.signing_bytes());
    }

    #[test]
    fn open_package_roundtrip_both_modes() {
        let registry = SuiteRegistry::with_test_suites();
        for mode in [PayloadMode::CrossCheck, PayloadMode::XorMask] {
            let mut r = rng();
            let (send, recv) = dual_suites(&registry, &mut r);
            let rnd = vec![0x42; 32];
            let pkg = build_package(
                &registry,
                &mut r,
                KeyId::from_bytes([2; 16]),
                &rnd,
                meta(PathId::Single),
                &send,
                mode,
            )
            .unwrap();
            let out = open_package(&registry, &pkg, &recv, mode, 32).unwrap();
            assert_eq!(out, rnd);
        }
    }

    #[test]
    fn corrupted_ciphertext_fails_closed() {
        let registry = SuiteRegistry::with_test_suites();
        let mut r = rng();
        let (send, recv) = dual_suites(&registry, &mut r);
        let pkg = build_package(
            &registry,
            &mut r,
            KeyId::from_bytes([3; 16]),
            &vec![1u8; 32],
            meta(PathId::Single),
            &send,
            PayloadMode::CrossCheck,
        )
        .unwrap();
        // Any payload/ciphertext change breaks the signatures.
        let mut tampered = pkg.clone();
        tampered.ciphertexts[0].ciphertext[5] ^= 1;
        assert!(matches!(
            open_package(&registry, &tampered, &recv, PayloadMode::CrossCheck, 32),
            Err(PackageError::SignatureInvalid(_))
        ));
        // Even with the body re-signed, the cross-check catches the
        // disagreeing recovery.
        let body = tampered.signing_bytes();
        tampered.signatures.clear();
        for s in &send {
            let suite = registry.sig(&s.sig).unwrap();
            tampered.signatures.push(PackageSignature {
                sig_suite: s.sig.clone(),
                signature: crypto::sign(suite, &s.sig_sk, &body).unwrap(),
            });
        }
        assert_eq!(
            open_package(&registry, &tampered, &recv, PayloadMode::CrossCheck, 32).unwrap_err(),
            PackageError::CrossCheckMismatch
        );
    }

    #[test]
    fn wrong_suite_package_rejected() {
        let registry = SuiteRegistry::with_test_suites();
        let mut r = rng();
        let (send, recv) = dual_suites(&registry, &mut r);
        let pkg = build_package(
            &registry,
            &mut r,
            KeyId::from_bytes([4; 16]),
            &vec![1u8; 32],
            meta(PathId::Single),
            &send[..1],
            PayloadMode::CrossCheck,
        )
        .unwrap();
        // A receiver expecting suite pair b gets a package for pair a.
        assert!(matches!(
            open_package(&registry, &pkg, &recv[1..], PayloadMode::CrossCheck, 32),
            Err(PackageError::SuiteMismatch { .. })
        ));
    }

    #[test]
    fn match_queue_matches_in_any_order_and_once() {
        let mut q = MatchQueue::new(Duration::from_secs(30));
        let id = KeyId::from_bytes([5; 16]);
        let half = |at_ms: u64| HalfArrival {
            rnd: vec![0; 32],
            validity: ValidityWindow::new(0, 10).unwrap(),
            at: SimTime::from_millis(at_ms),
        };
        // Ground arrives 600 ms after the space half.
        assert!(matches!(
            q.insert(id, PathId::Space, half(0)),
            MatchOutcome::Waiting
        ));
        assert!(matches!(
            q.insert(id, PathId::Ground, half(600)),
            MatchOutcome::Matched(..)
        ));
        assert!(q.is_empty());
        // A second half on the same path for the same id is a duplicate.
        assert!(matches!(
            q.insert(id, PathId::Ground, half(700)),
            MatchOutcome::Waiting
        ));
        assert!(matches!(
            q.insert(id, PathId::Ground, half(800)),
            MatchOutcome::DuplicateHalf
        ));
    }

    #[test]
    fn match_queue_purges_stale_single_halves() {
        let mut q = MatchQueue::new(Duration::from_secs(30));
        let id = KeyId::from_bytes([6; 16]);
        q.insert(id, PathId::Space, HalfArrival {
            rnd: vec![0; 32],
            validity: ValidityWindow::new(0, 10).unwrap(),
            at: SimTime::ZERO,
        });
        assert!(q.purge(SimTime::from_secs(29)).is_empty());
        assert_eq!(q.purge(SimTime::from_secs(31)), vec![id]);
        assert!(q.is_empty());
    }

    #[test]
    fn bridge_supplier_id_is_order_independent() {
        let a = bridge_supplier_id(&["link:2".into(), "link:1".into()]);
        let b = bridge_supplier_id(&["link:1".into(), "link:2".into()]);
        assert_eq!(a, b);
        assert_eq!(a, "hybrid:link:1+link:2");
    }
}
