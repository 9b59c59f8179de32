//! One simulated node: its key store plus every protocol state machine
//! attached to it, dispatched from the event loop.

pub mod messages;

use std::collections::BTreeMap;
use std::time::Duration;

use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::border::{Bridge, M4Receiver, M4Sender, PathId};
use crate::core::wire::Canonical;
use crate::core::{KeyId, NodeId};
use crate::crypto::SuiteRegistry;
use crate::forwarding::RelayEngine;
use crate::kms::KeyStore;
use crate::netsim::{ChannelId, Delivery, End, EventQueue, Network, SimTime};
use crate::qkd_emu::ExchangeRole;
use messages::{M4Body, NetMessage, StreamId};

/// A node-local handle to one end of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Port {
    pub channel: ChannelId,
    pub end: End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerTag {
    ExchangeEmit(StreamId),
    ExchangeAckTimeout(StreamId, u64),
    ExchangeResume(StreamId),
    BridgeTick(String),
    M4BlockTick(String),
    M4AckTimeout(String, PathId, u64),
    M4Sweep(String),
    M4Resume(String),
    RelayGuard(KeyId),
}

/// Everything the event loop can schedule.
#[derive(Debug)]
pub enum EventKind {
    Deliver { delivery: Delivery, bytes: Vec<u8> },
    Timer { actor: usize, tag: TimerTag },
    Script(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct E2eRecord {
    pub e2e_key_id: KeyId,
    pub source: NodeId,
    pub destination: NodeId,
    pub requested_at_ns: u64,
    pub completed_at_ns: Option<u64>,
    pub status: String,
    pub label: Option<String>,
}

/// Counters, timestamped marks for rate measurements, and end-to-end
/// delivery records.
#[derive(Debug, Default)]
pub struct Metrics {
    pub counters: BTreeMap<String, u64>,
    pub marks: BTreeMap<String, Vec<u64>>,
    pub e2e: Vec<E2eRecord>,
    e2e_index: BTreeMap<KeyId, usize>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inc(&mut self, key: &str) {
        *self.counters.entry(key.to_string()).or_default() += 1;
    }

    pub fn add(&mut self, key: &str, n: u64) {
        *self.counters.entry(key.to_string()).or_default() += n;
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn mark(&mut self, key: &str, now: SimTime, count: usize) {
        let v = self.marks.entry(key.to_string()).or_default();
        for _ in 0..count {
            v.push(now.as_nanos());
        }
    }

    pub fn begin_e2e(&mut self, id: KeyId, source: NodeId, destination: NodeId, now: SimTime) {
        self.e2e_index.insert(id, self.e2e.len());
        self.e2e.push(E2eRecord {
            e2e_key_id: id,
            source,
            destination,
            requested_at_ns: now.as_nanos(),
            completed_at_ns: None,
            status: "pending".into(),
            label: None,
        });
    }

    pub fn complete_e2e(&mut self, id: KeyId, now: SimTime, label: String) {
        if let Some(&i) = self.e2e_index.get(&id) {
            let rec = &mut self.e2e[i];
            if rec.status == "pending" {
                rec.completed_at_ns = Some(now.as_nanos());
                rec.status = "delivered".into();
                rec.label = Some(label);
            }
        }
    }

    pub fn fail_e2e(&mut self, id: KeyId, reason: &str) {
        if let Some(&i) = self.e2e_index.get(&id) {
            let rec = &mut self.e2e[i];
            if rec.status == "pending" {
                rec.status = format!("failed: {reason}");
            }
        }
    }
}

/// Borrowed view of the world a state machine acts through: virtual
/// time, the seeded RNG, the transport, the scheduler and the metrics.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub self_actor: usize,
    pub rng: &'a mut ChaCha12Rng,
    pub net: &'a mut Network,
    pub queue: &'a mut EventQueue<EventKind>,
    pub metrics: &'a mut Metrics,
    pub registry: &'a SuiteRegistry,
}

impl Ctx<'_> {
    pub fn now_s(&self) -> u64 {
        self.now.as_secs()
    }

    /// Serialize and hand the message to the channel. A killed channel
    /// swallows it, exactly like sending into a dead link.
    pub fn send(&mut self, port: Port, msg: &NetMessage) {
        let bytes = msg.canonical_bytes();
        if let Some(delivery) = self
            .net
            .send(self.now, self.rng, port.channel, port.end, bytes.len())
        {
            self.queue.push(delivery.at, EventKind::Deliver { delivery, bytes });
        }
    }

    pub fn set_timer(&mut self, delay: Duration, tag: TimerTag) {
        self.queue.push(self.now + delay, EventKind::Timer {
            actor: self.self_actor,
            tag,
        });
    }

    pub fn inc(&mut self, key: &str) {
        self.metrics.inc(key);
    }

    pub fn add(&mut self, key: &str, n: u64) {
        self.metrics.add(key, n);
    }

    pub fn mark(&mut self, key: &str, count: usize) {
        self.metrics.mark(key, self.now, count);
    }
}

/// All state machines living on one node, sharing its key store.
#[derive(Debug)]
pub struct NodeActor {
    pub node: NodeId,
    pub kms: KeyStore,
    pub exchanges: BTreeMap<StreamId, ExchangeRole>,
    pub bridges: BTreeMap<String, Bridge>,
    pub m4_senders: BTreeMap<String, M4Sender>,
    pub m4_receivers: BTreeMap<String, M4Receiver>,
    pub relay: RelayEngine,
    /// Channel name to local port, for route hops given by name.
    pub ports: BTreeMap<String, Port>,
}

impl NodeActor {
    pub fn new(node: NodeId) -> Self {
        let kms = KeyStore::new(node.clone());
        let relay = RelayEngine::new(node.clone());
        Self {
            node,
            kms,
            exchanges: BTreeMap::new(),
            bridges: BTreeMap::new(),
            m4_senders: BTreeMap::new(),
            m4_receivers: BTreeMap::new(),
            relay,
            ports: BTreeMap::new(),
        }
    }

    /// Arm the initial timers of every machine on this node.
    pub fn start(&mut self, ctx: &mut Ctx) {
        for role in self.exchanges.values() {
            if let ExchangeRole::Initiator(i) = role {
                i.start(ctx);
            }
        }
        for bridge in self.bridges.values() {
            bridge.start(ctx);
        }
        for sender in self.m4_senders.values() {
            sender.start(ctx);
        }
        for receiver in self.m4_receivers.values() {
            receiver.start(ctx);
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, arrival: Port, bytes: &[u8]) {
        let msg = match NetMessage::decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                ctx.inc("net.decode_error");
                log::debug!("{}: undecodable message dropped: {e}", self.node);
                return;
            }
        };
        match msg {
            NetMessage::Exchange { stream, body } => {
                match self.exchanges.get_mut(&stream) {
                    Some(role) => role.on_body(ctx, &mut self.kms, body, arrival),
                    None => ctx.inc("net.unrouted"),
                }
            }
            NetMessage::M4 { pair, body } => match body {
                M4Body::Block {
                    seq,
                    path,
                    packages,
                } => match self.m4_receivers.get_mut(&pair) {
                    Some(r) => r.on_block(ctx, &mut self.kms, seq, path, &packages, arrival),
                    None => ctx.inc("net.unrouted"),
                },
                M4Body::BlockAck {
                    seq,
                    path,
                    verified,
                } => match self.m4_senders.get_mut(&pair) {
                    Some(s) => s.on_block_ack(ctx, &mut self.kms, seq, path, &verified),
                    None => ctx.inc("net.unrouted"),
                },
                M4Body::SyncReq { recoverable, dead } => {
                    match self.m4_receivers.get_mut(&pair) {
                        Some(r) => {
                            r.on_sync_req(ctx, &mut self.kms, &recoverable, &dead, arrival);
                        }
                        None => ctx.inc("net.unrouted"),
                    }
                }
                M4Body::SyncResp { stored, revoked } => {
                    match self.m4_senders.get_mut(&pair) {
                        Some(s) => s.on_sync_resp(ctx, &mut self.kms, &stored, revoked),
                        None => ctx.inc("net.unrouted"),
                    }
                }
            },
            NetMessage::Relay(msg) => {
                self.relay
                    .on_relay(ctx, &mut self.kms, &self.ports, msg, arrival);
            }
            NetMessage::RelayAck { e2e_key_id, label } => {
                self.relay.on_ack(ctx, &mut self.kms, e2e_key_id, label);
            }
            NetMessage::RelayNak {
                e2e_key_id,
                failed_hop,
                reason,
            } => {
                self.relay.on_nak(ctx, e2e_key_id, failed_hop, &reason);
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, tag: TimerTag) {
        match &tag {
            TimerTag::ExchangeEmit(stream)
            | TimerTag::ExchangeAckTimeout(stream, _)
            | TimerTag::ExchangeResume(stream) => {
                if let Some(role) = self.exchanges.get_mut(stream) {
                    role.on_timer(ctx, &tag);
                }
            }
            TimerTag::BridgeTick(pair) => {
                if let Some(bridge) = self.bridges.get_mut(pair) {
                    bridge.on_tick(ctx, &mut self.kms);
                }
            }
            TimerTag::M4BlockTick(pair) => {
                if let Some(s) = self.m4_senders.get_mut(pair) {
                    s.on_block_tick(ctx, &mut self.kms);
                }
            }
            TimerTag::M4AckTimeout(pair, path, seq) => {
                if let Some(s) = self.m4_senders.get_mut(pair) {
                    s.on_ack_timeout(ctx, *path, *seq);
                }
            }
            TimerTag::M4Sweep(pair) => {
                if let Some(s) = self.m4_senders.get_mut(pair) {
                    s.on_sweep(ctx);
                } else if let Some(r) = self.m4_receivers.get_mut(pair) {
                    r.on_sweep(ctx);
                }
            }
            TimerTag::M4Resume(pair) => {
                if let Some(s) = self.m4_senders.get_mut(pair) {
                    s.on_resume(ctx);
                }
            }
            TimerTag::RelayGuard(id) => {
                self.relay.on_guard(ctx, &mut self.kms, *id);
            }
        }
    }
}
