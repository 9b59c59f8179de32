//! Deterministic simulated transport: reliable, in-order, bidirectional
//! channels with configurable latency, jitter, bandwidth and
//! kill-switches, driven by a virtual-time event queue.
//!
//! The event queue is the single source of time. Loss below
//! `loss_before_retry` is absorbed by internal retries, so a live
//! channel delivers every message exactly once and in order; a killed
//! channel delivers nothing and buffers nothing. All randomness comes
//! from the caller's seeded RNG, so identical seeds and schedules
//! produce identical delivery traces.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("channel '{0}' already open")]
    DuplicateChannel(String),
}

/// Nanoseconds of virtual time since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> u64 {
        self.0 / 1_000_000_000
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, d: Duration) -> SimTime {
        SimTime(self.0 + d.as_nanos() as u64)
    }
}

impl Sub<SimTime> for SimTime {
    type Output = Duration;

    fn sub(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Transport parameters of one bidirectional channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub channel_id: String,
    pub latency: Duration,
    pub jitter: Duration,
    /// `None` means unlimited.
    pub bandwidth_bps: Option<u64>,
    /// Probability in [0, 1) that a single transmission attempt is lost
    /// and internally retried.
    pub loss_before_retry: f64,
}

impl ChannelSpec {
    pub fn instant(id: &str) -> Self {
        Self {
            channel_id: id.to_string(),
            latency: Duration::ZERO,
            jitter: Duration::ZERO,
            bandwidth_bps: None,
            loss_before_retry: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum End {
    A,
    B,
}

impl End {
    pub fn other(self) -> End {
        match self {
            End::A => End::B,
            End::B => End::A,
        }
    }

    fn index(self) -> usize {
        match self {
            End::A => 0,
            End::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub usize);

/// A message scheduled for arrival. Stale epochs (from before a kill)
/// are silently discarded at delivery time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub channel: ChannelId,
    pub to_end: End,
    pub epoch: u32,
    pub at: SimTime,
}

#[derive(Debug)]
struct Channel {
    spec: ChannelSpec,
    alive: bool,
    epoch: u32,
    /// Per-direction floor keeping arrivals monotonic (in-order).
    arrival_floor: [SimTime; 2],
}

/// One delivered message, as written to the trace log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub at_ns: u64,
    pub channel: String,
    pub to_end: End,
    pub size: usize,
    pub payload_hash: String,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        let dir = match self.to_end {
            End::B => "a>b",
            End::A => "b>a",
        };
        format!(
            "{} {} {} {} {}",
            self.at_ns, self.channel, dir, self.size, self.payload_hash
        )
    }

    pub fn parse_line(line: &str) -> Result<TraceRecord, TraceParseError> {
        let mut parts = line.split(' ');
        let mut next = |what: &'static str| {
            parts
                .next()
                .ok_or(TraceParseError::MissingField(what))
        };
        let at_ns = next("time")?
            .parse()
            .map_err(|_| TraceParseError::BadField("time"))?;
        let channel = next("channel")?.to_string();
        if channel.is_empty() {
            return Err(TraceParseError::BadField("channel"));
        }
        let to_end = match next("direction")? {
            "a>b" => End::B,
            "b>a" => End::A,
            _ => return Err(TraceParseError::BadField("direction")),
        };
        let size = next("size")?
            .parse()
            .map_err(|_| TraceParseError::BadField("size"))?;
        let payload_hash = next("hash")?.to_string();
        if payload_hash.len() != 16 || !payload_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(TraceParseError::BadField("hash"));
        }
        if parts.next().is_some() {
            return Err(TraceParseError::TrailingFields);
        }
        Ok(TraceRecord {
            at_ns,
            channel,
            to_end,
            size,
            payload_hash,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("missing field '{0}'")]
    MissingField(&'static str),
    #[error("malformed field '{0}'")]
    BadField(&'static str),
    #[error("trailing fields")]
    TrailingFields,
}

/// The set of channels plus the delivery trace.
#[derive(Debug, Default)]
pub struct Network {
    channels: Vec<Channel>,
    by_name: BTreeMap<String, ChannelId>,
    trace: Vec<TraceRecord>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_channel(&mut self, spec: ChannelSpec) -> Result<ChannelId, NetError> {
        if self.by_name.contains_key(&spec.channel_id) {
            return Err(NetError::DuplicateChannel(spec.channel_id));
        }
        let id = ChannelId(self.channels.len());
        self.by_name.insert(spec.channel_id.clone(), id);
        self.channels.push(Channel {
            spec,
            alive: true,
            epoch: 0,
            arrival_floor: [SimTime::ZERO; 2],
        });
        Ok(id)
    }

    pub fn channel_id(&self, name: &str) -> Result<ChannelId, NetError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NetError::UnknownChannel(name.to_string()))
    }

    pub fn channel_name(&self, id: ChannelId) -> &str {
        &self.channels[id.0].spec.channel_id
    }

    /// Compute the arrival of a message sent now. `None` when the
    /// channel is killed: nothing is buffered, nothing will arrive.
    pub fn send(
        &mut self,
        now: SimTime,
        rng: &mut impl rand::RngCore,
        channel: ChannelId,
        from: End,
        size: usize,
    ) -> Option<Delivery> {
        let ch = &mut self.channels[channel.0];
        if !ch.alive {
            return None;
        }
        let spec = &ch.spec;
        let draw_jitter = |rng: &mut dyn rand::RngCore| -> u64 {
            let j = spec.jitter.as_nanos() as u64;
            if j == 0 {
                0
            } else {
                rng.gen_range(0..j)
            }
        };
        let serialization = spec
            .bandwidth_bps
            .map(|bw| (size as u128 * 8 * 1_000_000_000 / bw as u128) as u64)
            .unwrap_or(0);
        let mut at =
            now.0 + spec.latency.as_nanos() as u64 + serialization + draw_jitter(rng);
        // Lost attempts retry after roughly one round trip.
        if spec.loss_before_retry > 0.0 {
            while rng.gen::<f64>() < spec.loss_before_retry {
                at += 2 * spec.latency.as_nanos() as u64 + draw_jitter(rng) + 1_000;
            }
        }
        let to_end = from.other();
        let floor = &mut ch.arrival_floor[to_end.index()];
        let at = SimTime(at.max(floor.0));
        *floor = at;
        Some(Delivery {
            channel,
            to_end,
            epoch: ch.epoch,
            at,
        })
    }

    /// True when a scheduled delivery is still current: channel alive
    /// and not killed since the message was sent.
    pub fn deliverable(&self, delivery: &Delivery) -> bool {
        let ch = &self.channels[delivery.channel.0];
        ch.alive && ch.epoch == delivery.epoch
    }

    pub fn kill(&mut self, name: &str) -> Result<(), NetError> {
        let id = self.channel_id(name)?;
        let ch = &mut self.channels[id.0];
        ch.alive = false;
        ch.epoch += 1;
        Ok(())
    }

    pub fn heal(&mut self, name: &str) -> Result<(), NetError> {
        let id = self.channel_id(name)?;
        self.channels[id.0].alive = true;
        Ok(())
    }

    pub fn is_alive(&self, id: ChannelId) -> bool {
        self.channels[id.0].alive
    }

    pub fn record_delivery(&mut self, delivery: &Delivery, payload: &[u8]) {
        let mut h = Sha256::new();
        h.update(payload);
        let digest = h.finalize();
        self.trace.push(TraceRecord {
            at_ns: delivery.at.0,
            channel: self.channels[delivery.channel.0].spec.channel_id.clone(),
            to_end: delivery.to_end,
            size: payload.len(),
            payload_hash: hex::encode(&digest[..8]),
        });
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_hash(&self) -> String {
        let mut h = Sha256::new();
        for rec in &self.trace {
            h.update(rec.line().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

// --- event queue ---

struct QueueEntry<K> {
    at: SimTime,
    seq: u64,
    kind: K,
}

impl<K> PartialEq for QueueEntry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<K> Eq for QueueEntry<K> {}

impl<K> Ord for QueueEntry<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we pop earliest first,
        // insertion order breaking ties.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl<K> PartialOrd for QueueEntry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap of timed events with deterministic FIFO tie-break.
pub struct EventQueue<K> {
    heap: BinaryHeap<QueueEntry<K>>,
    next_seq: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: SimTime, kind: K) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(QueueEntry { at, seq, kind });
    }

    pub fn pop(&mut self) -> Option<(SimTime, K)> {
        self.heap.pop().map(|e| (e.at, e.kind))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn spec(id: &str, latency_ms: u64, jitter_ms: u64, loss: f64) -> ChannelSpec {
        ChannelSpec {
            channel_id: id.into(),
            latency: Duration::from_millis(latency_ms),
            jitter: Duration::from_millis(jitter_ms),
            bandwidth_bps: None,
            loss_before_retry: loss,
        }
    }

    #[test]
    fn latency_bounds_delivery_time() {
        let mut net = Network::new();
        let ch = net.open_channel(spec("sat", 600, 50, 0.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = net
                .send(SimTime::ZERO, &mut rng, ch, End::A, 100)
                .unwrap();
            assert!(d.at >= SimTime::from_millis(600));
            assert!(d.at <= SimTime::from_millis(650));
        }
    }

    #[test]
    fn zero_latency_is_immediate_and_ordered() {
        let mut net = Network::new();
        let ch = net.open_channel(spec("loop", 0, 0, 0.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = net.send(SimTime(5), &mut rng, ch, End::A, 10).unwrap();
        assert_eq!(d.at, SimTime(5));
    }

    #[test]
    fn exactly_once_in_order_under_loss() {
        // 1000 messages at 30% per-attempt loss: all arrive, in order,
        // exactly once.
        let mut net = Network::new();
        let ch = net.open_channel(spec("lossy", 10, 5, 0.3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut queue = EventQueue::new();
        for i in 0u64..1000 {
            let now = SimTime::from_millis(i);
            let d = net.send(now, &mut rng, ch, End::A, 64).unwrap();
            queue.push(d.at, i);
        }
        let mut seen = Vec::new();
        while let Some((_, i)) = queue.pop() {
            seen.push(i);
        }
        let expected: Vec<u64> = (0..1000).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn kill_drops_heal_resumes() {
        let mut net = Network::new();
        let ch = net.open_channel(spec("c", 1, 0, 0.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        net.kill("c").unwrap();
        assert!(net.send(SimTime::ZERO, &mut rng, ch, End::A, 1).is_none());
        net.heal("c").unwrap();
        let d = net.send(SimTime::ZERO, &mut rng, ch, End::A, 1).unwrap();
        assert!(net.deliverable(&d));
    }

    #[test]
    fn in_flight_messages_die_with_the_channel() {
        let mut net = Network::new();
        let ch = net.open_channel(spec("c", 100, 0, 0.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = net.send(SimTime::ZERO, &mut rng, ch, End::A, 1).unwrap();
        net.kill("c").unwrap();
        net.heal("c").unwrap();
        assert!(!net.deliverable(&d), "pre-kill message must not deliver");
    }

    #[test]
    fn unknown_channel_errors() {
        let mut net = Network::new();
        assert_eq!(
            net.kill("nope").unwrap_err(),
            NetError::UnknownChannel("nope".into())
        );
    }

    #[test]
    fn identical_seeds_produce_identical_traces() {
        let run = || {
            let mut net = Network::new();
            let ch = net.open_channel(spec("c", 10, 8, 0.2)).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(1234);
            for i in 0u64..200 {
                let payload = i.to_be_bytes();
                if let Some(d) =
                    net.send(SimTime::from_millis(i * 3), &mut rng, ch, End::A, payload.len())
                {
                    net.record_delivery(&d, &payload);
                }
            }
            net.trace_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_lines_roundtrip() {
        let rec = TraceRecord {
            at_ns: 123456,
            channel: "ground".into(),
            to_end: End::B,
            size: 842,
            payload_hash: "00ff00ff00ff00ff".into(),
        };
        let parsed = TraceRecord::parse_line(&rec.line()).unwrap();
        assert_eq!(parsed, rec);
        assert!(TraceRecord::parse_line("garbage").is_err());
        assert!(TraceRecord::parse_line("1 c a>b 5 zz").is_err());
    }
}
