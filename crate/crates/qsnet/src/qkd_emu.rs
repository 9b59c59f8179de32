//! Emulated QKD link engine: a per-key exchange that makes identical
//! key streams appear in the two endpoint stores at a QoS-controlled
//! rate, over a KEM-protected reliable channel.
//!
//! Each key follows the same shape: draw random bytes and an id,
//! encapsulate a fresh wrapping secret per suite, mask the bytes, sign
//! the canonical package, send. The responder verifies before touching
//! its store, pushes, and acknowledges; the initiator pushes only on
//! acknowledgment, so the stores never disagree about a committed key.
//! After an outage the initiator syncs its last acknowledged sequence
//! number and the responder revokes anything newer, restoring
//! agreement.
//!
//! With one suite this is the link emulation; with two suites and the
//! cross-check payload mode it is the application-based border-node
//! exchange (border method 3), which configures the same engine.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::border::{build_package, open_package, KeyPackage, PackageMeta, PathId, PayloadMode,
    RecvSuite, SendSuite};
use crate::core::{KeyEntry, KeyId, KeyMaterial, NodeId, ValidityWindow};
use crate::kms::{KeyStore, KmsError, PushOutcome};
use crate::node::messages::{ExchangeBody, NetMessage, StreamId};
use crate::node::{Ctx, Port, TimerTag};
use crate::seclevel::SecurityExpr;

#[derive(Debug, Clone)]
pub struct ExchangeConfig {
    pub stream: StreamId,
    pub supplier_id: String,
    pub local: NodeId,
    pub peer: NodeId,
    pub key_len: u32,
    /// Token-bucket emission period with a one-key burst:
    /// `8 * key_len / qos_rate_bps` seconds.
    pub period: Duration,
    pub validity: Duration,
    pub label: SecurityExpr,
    pub mode: PayloadMode,
    pub ack_timeout: Duration,
    pub port: Port,
    pub metric_prefix: String,
}

impl ExchangeConfig {
    /// Emission period for a QoS rate, e.g. 256 bit/s with 32-byte keys
    /// gives exactly one key per second.
    pub fn period_for(rate_bps: u64, key_len: u32) -> Duration {
        Duration::from_secs_f64(8.0 * f64::from(key_len) / rate_bps as f64)
    }
}

#[derive(Debug)]
struct PendingKey {
    seq: u64,
    entry: KeyEntry,
}

/// The side that draws keys and pushes them after acknowledgment.
#[derive(Debug)]
pub struct Initiator {
    pub cfg: ExchangeConfig,
    suites: Vec<SendSuite>,
    next_seq: u64,
    pending: Option<PendingKey>,
    acked_seq: u64,
    in_backoff: bool,
    backoff_attempt: u32,
    pub produced: u64,
}

impl Initiator {
    pub fn new(cfg: ExchangeConfig, suites: Vec<SendSuite>) -> Self {
        assert!(!suites.is_empty());
        Self {
            cfg,
            suites,
            next_seq: 1,
            pending: None,
            acked_seq: 0,
            in_backoff: false,
            backoff_attempt: 0,
            produced: 0,
        }
    }

    fn metric(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.cfg.metric_prefix)
    }

    pub fn start(&self, ctx: &mut Ctx) {
        ctx.set_timer(self.cfg.period, TimerTag::ExchangeEmit(self.cfg.stream));
    }

    pub fn on_emit(&mut self, ctx: &mut Ctx) {
        ctx.set_timer(self.cfg.period, TimerTag::ExchangeEmit(self.cfg.stream));
        if self.in_backoff || self.pending.is_some() {
            // One-key burst budget: an outstanding key eats the slot.
            return;
        }
        let len = self.cfg.key_len as usize;
        let rnd_id = KeyId::random(ctx.rng);
        let mut bytes = vec![0u8; len];
        rand::RngCore::fill_bytes(ctx.rng, &mut bytes);
        let now_s = ctx.now_s();
        let validity = ValidityWindow::new(now_s, now_s + self.cfg.validity.as_secs().max(1))
            .expect("window");
        let package = build_package(
            ctx.registry,
            ctx.rng,
            rnd_id,
            &bytes,
            PackageMeta {
                sender: self.cfg.local.clone(),
                validity,
                path: PathId::Single,
            },
            &self.suites,
            self.cfg.mode,
        )
        .expect("package build");
        let entry = KeyEntry::new(
            rnd_id,
            KeyMaterial::new(bytes).expect("length"),
            self.cfg.peer.clone(),
            &self.cfg.supplier_id,
            validity,
            self.cfg.label.clone(),
        )
        .expect("entry");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending = Some(PendingKey { seq, entry });
        ctx.send(self.cfg.port, &NetMessage::Exchange {
            stream: self.cfg.stream,
            body: ExchangeBody::Package { seq, package },
        });
        ctx.set_timer(
            self.cfg.ack_timeout,
            TimerTag::ExchangeAckTimeout(self.cfg.stream, seq),
        );
        ctx.inc(&self.metric("sent"));
    }

    pub fn on_ack(&mut self, ctx: &mut Ctx, kms: &mut KeyStore, seq: u64, rnd_id: KeyId) {
        match &self.pending {
            Some(p) if p.seq == seq && p.entry.key_id == rnd_id => {}
            _ => {
                ctx.inc(&self.metric("stale_ack"));
                return;
            }
        }
        let p = self.pending.take().expect("matched above");
        match kms.push_key(&self.cfg.supplier_id, p.entry) {
            Ok(_) => {
                self.produced += 1;
                self.acked_seq = seq;
                ctx.inc(&self.metric("delivered"));
                ctx.mark(&self.metric("delivered"), 1);
            }
            Err(e) => {
                ctx.inc(&self.metric("error"));
                log::warn!("exchange {} initiator push: {e}", self.cfg.supplier_id);
            }
        }
    }

    pub fn on_ack_timeout(&mut self, ctx: &mut Ctx, seq: u64) {
        let timed_out = matches!(&self.pending, Some(p) if p.seq == seq);
        if !timed_out {
            return;
        }
        // The channel is unavailable: discard the key and retry the
        // session with exponential backoff (1 s base, 60 s cap).
        self.pending = None;
        ctx.inc(&self.metric("lost"));
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
        ctx.set_timer(delay, TimerTag::ExchangeResume(self.cfg.stream));
    }

    pub fn on_resume(&mut self, ctx: &mut Ctx) {
        if !self.in_backoff {
            return;
        }
        ctx.send(self.cfg.port, &NetMessage::Exchange {
            stream: self.cfg.stream,
            body: ExchangeBody::SyncReq {
                acked_seq: self.acked_seq,
            },
        });
        ctx.inc(&self.metric("sync_attempt"));
        self.schedule_resume(ctx);
    }

    pub fn on_sync_resp(&mut self, ctx: &mut Ctx, revoked: u32) {
        if !self.in_backoff {
            return;
        }
        self.in_backoff = false;
        self.backoff_attempt = 0;
        ctx.add(&self.metric("peer_revoked"), u64::from(revoked));
        ctx.inc(&self.metric("sync_done"));
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }
}

/// The side that verifies, stores, and acknowledges.
#[derive(Debug)]
pub struct Responder {
    pub cfg: ExchangeConfig,
    suites: Vec<RecvSuite>,
    stored_by_seq: BTreeMap<u64, KeyId>,
    seen_rnd: BTreeSet<KeyId>,
}

impl Responder {
    pub fn new(cfg: ExchangeConfig, suites: Vec<RecvSuite>) -> Self {
        assert!(!suites.is_empty());
        Self {
            cfg,
            suites,
            stored_by_seq: BTreeMap::new(),
            seen_rnd: BTreeSet::new(),
        }
    }

    fn metric(&self, suffix: &str) -> String {
        format!("{}.recv.{suffix}", self.cfg.metric_prefix)
    }

    pub fn on_package(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        seq: u64,
        package: &KeyPackage,
        arrival_port: Port,
    ) {
        if package.meta.sender != self.cfg.peer {
            ctx.inc(&self.metric("unknown_sender"));
            ctx.inc(&self.metric("dos"));
            return;
        }
        // No store write ever precedes signature verification.
        let bytes = match open_package(
            ctx.registry,
            package,
            &self.suites,
            self.cfg.mode,
            self.cfg.key_len as usize,
        ) {
            Ok(bytes) => bytes,
            Err(e) => {
                ctx.inc(&self.metric("dos"));
                log::debug!("exchange {} drop: {e}", self.cfg.supplier_id);
                return;
            }
        };
        if let Some(known) = self.stored_by_seq.get(&seq) {
            ctx.inc(&self.metric("replay"));
            if *known == package.rnd_id {
                // Duplicate of a stored key: acknowledge again so the
                // initiator converges, store nothing twice.
                self.ack(ctx, arrival_port, seq, package.rnd_id);
            }
            return;
        }
        if self.seen_rnd.contains(&package.rnd_id) {
            ctx.inc(&self.metric("replay"));
            return;
        }
        let entry = KeyEntry::new(
            package.rnd_id,
            KeyMaterial::new(bytes).expect("verified length"),
            self.cfg.peer.clone(),
            &self.cfg.supplier_id,
            package.meta.validity,
            self.cfg.label.clone(),
        )
        .expect("entry");
        match kms.push_key(&self.cfg.supplier_id, entry) {
            Ok(PushOutcome::Stored) | Ok(PushOutcome::Duplicate) => {}
            Err(KmsError::IntegrityConflict { .. }) => {
                ctx.inc(&self.metric("integrity_alarm"));
                ctx.inc(&self.metric("dos"));
                return;
            }
            Err(e) => {
                ctx.inc(&self.metric("error"));
                log::warn!("exchange {} responder push: {e}", self.cfg.supplier_id);
                return;
            }
        }
        self.stored_by_seq.insert(seq, package.rnd_id);
        self.seen_rnd.insert(package.rnd_id);
        ctx.inc(&self.metric("stored"));
        ctx.mark(&self.metric("stored"), 1);
        self.ack(ctx, arrival_port, seq, package.rnd_id);
    }

    fn ack(&self, ctx: &mut Ctx, port: Port, seq: u64, rnd_id: KeyId) {
        ctx.send(port, &NetMessage::Exchange {
            stream: self.cfg.stream,
            body: ExchangeBody::Ack { seq, rnd_id },
        });
    }

    /// The initiator pushed everything up to `acked_seq`; anything we
    /// stored beyond that was never committed on the far side and is
    /// revoked, restoring store agreement.
    pub fn on_sync_req(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        acked_seq: u64,
        arrival_port: Port,
    ) {
        let orphans: Vec<(u64, KeyId)> = self
            .stored_by_seq
            .range(acked_seq + 1..)
            .map(|(s, id)| (*s, *id))
            .collect();
        let mut revoked = 0u32;
        for (seq, id) in orphans {
            if kms.revoke_unconsumed(&self.cfg.peer, &self.cfg.supplier_id, id) {
                revoked += 1;
            }
            self.stored_by_seq.remove(&seq);
        }
        if revoked > 0 {
            ctx.add(&self.metric("revoked"), u64::from(revoked));
        }
        ctx.send(arrival_port, &NetMessage::Exchange {
            stream: self.cfg.stream,
            body: ExchangeBody::SyncResp { revoked },
        });
    }
}

/// One endpoint of an exchange stream.
#[derive(Debug)]
pub enum ExchangeRole {
    Initiator(Initiator),
    Responder(Responder),
}

impl ExchangeRole {
    pub fn on_body(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        body: ExchangeBody,
        arrival_port: Port,
    ) {
        match (self, body) {
            (ExchangeRole::Responder(r), ExchangeBody::Package { seq, package }) => {
                r.on_package(ctx, kms, seq, &package, arrival_port);
            }
            (ExchangeRole::Initiator(i), ExchangeBody::Ack { seq, rnd_id }) => {
                i.on_ack(ctx, kms, seq, rnd_id);
            }
            (ExchangeRole::Responder(r), ExchangeBody::SyncReq { acked_seq }) => {
                r.on_sync_req(ctx, kms, acked_seq, arrival_port);
            }
            (ExchangeRole::Initiator(i), ExchangeBody::SyncResp { revoked }) => {
                i.on_sync_resp(ctx, revoked);
            }
            _ => {
                ctx.inc("exchange.misdirected");
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, tag: &TimerTag) {
        if let ExchangeRole::Initiator(i) = self {
            match tag {
                TimerTag::ExchangeEmit(_) => i.on_emit(ctx),
                TimerTag::ExchangeAckTimeout(_, seq) => i.on_ack_timeout(ctx, *seq),
                TimerTag::ExchangeResume(_) => i.on_resume(ctx),
                _ => {}
            }
        }
    }
}
