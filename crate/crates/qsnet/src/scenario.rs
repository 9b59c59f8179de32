//! Scenario runner: build a whole deployment from a config, run the
//! scripted actions over the virtual-time event loop, and produce the
//! report. One process, every node a state machine, the event queue
//! the only clock.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::border::{
    bridge_supplier_id, Bridge, BridgeConfig, M4Config, M4PathConfig, M4Receiver,
    M4RecvPathConfig, M4Sender, PayloadMode, RecvSuite, SendSuite,
};
use crate::config::{Action, BorderPairConfig, ConfigError, DeploymentConfig, Script};
use crate::core::{
    KeyId, KeyMaterial, LinkDescriptor, LinkId, LinkType, NodeId, ValidityWindow,
};
use crate::crypto::{self, Psk, SuiteRegistry};
use crate::forwarding::{plan_e2e_route, BorderBridge, Controller, LinkRouteInfo};
use crate::kms::{self, pad_parity_for, KeyQos, ListingRow};
use crate::netsim::{ChannelId, ChannelSpec, End, EventQueue, Network, SimTime};
use crate::node::messages::StreamId;
use crate::node::{Ctx, EventKind, Metrics, NodeActor, Port};
use crate::qkd_emu::{ExchangeConfig, ExchangeRole, Initiator, Responder};
use crate::report::{LinkReport, MethodReport, Report, StoreReport};
use crate::seclevel::{SecurityBase, SecurityExpr, SecurityLabel};

/// A buildable, runnable deployment.
pub struct World {
    config: DeploymentConfig,
    script: Script,
    registry: SuiteRegistry,
    rng: ChaCha12Rng,
    net: Network,
    queue: EventQueue<EventKind>,
    metrics: Metrics,
    actors: Vec<NodeActor>,
    actor_idx: BTreeMap<NodeId, usize>,
    attachments: BTreeMap<(ChannelId, End), usize>,
    controllers: BTreeMap<String, Controller>,
    bridges: Vec<BorderBridge>,
    link_info: BTreeMap<LinkId, LinkRouteInfo>,
    supplier_labels: BTreeMap<String, SecurityExpr>,
    method_of_pair: BTreeMap<String, u8>,
    now: SimTime,
    duration: SimTime,
    pub wall_clock: bool,
}

struct SuiteKeys {
    send: SendSuite,
    recv: RecvSuite,
}

impl World {
    pub fn build(config: DeploymentConfig, script: Script) -> Result<World, ConfigError> {
        let registry = SuiteRegistry::with_test_suites();
        config.validate(&registry)?;
        script.validate(&config)?;

        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut net = Network::new();
        let mut channel_ids: BTreeMap<String, ChannelId> = BTreeMap::new();
        for ch in &config.channels {
            let spec = ChannelSpec {
                channel_id: ch.id.clone(),
                latency: Duration::from_secs_f64(ch.latency_ms / 1e3),
                jitter: Duration::from_secs_f64(ch.jitter_ms / 1e3),
                bandwidth_bps: ch.bandwidth_bps,
                loss_before_retry: ch.loss_before_retry,
            };
            let id = net
                .open_channel(spec)
                .map_err(|e| ConfigError::new("channels", e.to_string()))?;
            channel_ids.insert(ch.id.clone(), id);
        }

        let nodes = config.all_nodes()?;
        let mut actors = Vec::new();
        let mut actor_idx = BTreeMap::new();
        for node in &nodes {
            actor_idx.insert(node.clone(), actors.len());
            actors.push(NodeActor::new(node.clone()));
        }

        // Controller scopes: merged groups share one controller.
        let mut scope_of: BTreeMap<String, String> = BTreeMap::new();
        for group in &config.merged_controllers {
            let scope = group.join("+");
            for d in group {
                scope_of.insert(d.clone(), scope.clone());
            }
        }
        let mut controllers: BTreeMap<String, Controller> = BTreeMap::new();
        for d in &config.domains {
            let scope = scope_of
                .get(&d.name)
                .cloned()
                .unwrap_or_else(|| d.name.clone());
            let ctl = controllers
                .entry(scope.clone())
                .or_insert_with(|| Controller::new(scope.clone()));
            for n in &d.nodes {
                let node = NodeId::new(&d.name, n).expect("validated");
                ctl.add_node(node.clone(), d.border_nodes.contains(n));
            }
        }
        let scope_of_node = |controllers: &BTreeMap<String, Controller>, n: &NodeId| -> String {
            controllers
                .values()
                .find(|c| c.nodes.contains(n))
                .map(|c| c.domain.clone())
                .expect("validated node")
        };

        let mut world = World {
            config: config.clone(),
            script,
            registry,
            rng,
            net,
            queue: EventQueue::new(),
            metrics: Metrics::new(),
            actors,
            actor_idx,
            attachments: BTreeMap::new(),
            controllers,
            bridges: Vec::new(),
            link_info: BTreeMap::new(),
            supplier_labels: BTreeMap::new(),
            method_of_pair: BTreeMap::new(),
            now: SimTime::ZERO,
            duration: SimTime::from_millis(0),
            wall_clock: false,
        };
        world.duration = SimTime::from_millis(world.script.duration_ms);

        // Plain links: one exchange stream each.
        for l in &config.links.clone() {
            let link_id: LinkId = l.id.parse().expect("validated");
            let a: NodeId = l.a.parse().expect("validated");
            let b: NodeId = l.b.parse().expect("validated");
            if !matches!(l.link_type, LinkType::Qkd | LinkType::Pqc) {
                return Err(ConfigError::new(
                    "links",
                    format!("link '{}' must be qkd or pqc to generate keys", l.id),
                ));
            }
            let descriptor = LinkDescriptor::new(
                link_id,
                a.clone(),
                b.clone(),
                l.link_type,
                l.rate_bps,
                l.key_len,
            )
            .map_err(|e| ConfigError::new(format!("links ({})", l.id), e.to_string()))?;
            let supplier = format!("link:{}:{}", l.id, l.kem);
            let mut tags: BTreeSet<String> = l.sc_tags.iter().cloned().collect();
            let base = match l.link_type {
                LinkType::Qkd => SecurityBase::Its,
                _ => {
                    // An emulated link's label carries the suite gaps too.
                    for s in [&l.kem, &l.sig] {
                        tags.extend(config.suite_tags.get(s).cloned().unwrap_or_default());
                    }
                    SecurityBase::Mc
                }
            };
            let label = SecurityExpr::atom(SecurityLabel::new(base, tags));
            let (port_a, port_b) = world.attach(&channel_ids, &l.channel, &a, &b)?;
            let stream = StreamId {
                id: *link_id.as_bytes(),
                instance: 0,
            };
            world.install_exchange(
                stream,
                &supplier,
                &a,
                &b,
                (port_a, port_b),
                l.rate_bps,
                l.key_len,
                label.clone(),
                &[(l.kem.clone(), l.sig.clone())],
                PayloadMode::CrossCheck,
                format!("link.{supplier}"),
            );
            world.supplier_labels.insert(supplier.clone(), label.clone());
            world
                .link_info
                .insert(link_id, LinkRouteInfo {
                    supplier,
                    channel: l.channel.clone(),
                });
            // Controller topology holds only links inside one scope.
            let scope_a = scope_of_node(&world.controllers, &a);
            let scope_b = scope_of_node(&world.controllers, &b);
            if scope_a == scope_b {
                world
                    .controllers
                    .get_mut(&scope_a)
                    .expect("scope exists")
                    .add_link(descriptor)
                    .map_err(|e| ConfigError::new(format!("links ({})", l.id), e.to_string()))?;
            }
        }

        for (i, p) in config.border_pairs.clone().iter().enumerate() {
            world.install_border_pair(i, p, &channel_ids, &scope_of_node)?;
        }

        Ok(world)
    }

    fn attach(
        &mut self,
        channel_ids: &BTreeMap<String, ChannelId>,
        channel: &str,
        a: &NodeId,
        b: &NodeId,
    ) -> Result<(Port, Port), ConfigError> {
        let ch = *channel_ids
            .get(channel)
            .ok_or_else(|| ConfigError::new("channel", format!("unknown '{channel}'")))?;
        let ia = self.actor_idx[a];
        let ib = self.actor_idx[b];
        let (end_a, end_b) = match (
            self.attachments.get(&(ch, End::A)),
            self.attachments.get(&(ch, End::B)),
        ) {
            (None, None) => {
                self.attachments.insert((ch, End::A), ia);
                self.attachments.insert((ch, End::B), ib);
                (End::A, End::B)
            }
            (Some(&xa), Some(&xb)) if xa == ia && xb == ib => (End::A, End::B),
            (Some(&xa), Some(&xb)) if xa == ib && xb == ia => (End::B, End::A),
            _ => {
                return Err(ConfigError::new(
                    "channel",
                    format!("channel '{channel}' is shared by different node pairs"),
                ));
            }
        };
        let port_a = Port { channel: ch, end: end_a };
        let port_b = Port { channel: ch, end: end_b };
        self.actors[ia].ports.insert(channel.to_string(), port_a);
        self.actors[ib].ports.insert(channel.to_string(), port_b);
        Ok((port_a, port_b))
    }

    fn make_suites(&mut self, pairs: &[(String, String)]) -> Vec<SuiteKeys> {
        pairs
            .iter()
            .map(|(kem_name, sig_name)| {
                let kem = self.registry.kem(kem_name).expect("validated").clone();
                let sig = self.registry.sig(sig_name).expect("validated").clone();
                let (kem_pk, kem_sk) = crypto::kem_keygen(&kem, &mut self.rng);
                let (sig_pk, sig_sk) = crypto::sig_keygen(&sig, &mut self.rng);
                SuiteKeys {
                    send: SendSuite {
                        kem: kem_name.clone(),
                        sig: sig_name.clone(),
                        peer_kem_pk: kem_pk,
                        sig_sk,
                    },
                    recv: RecvSuite {
                        kem: kem_name.clone(),
                        sig: sig_name.clone(),
                        kem_sk,
                        peer_sig_pk: sig_pk,
                    },
                }
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn install_exchange(
        &mut self,
        stream: StreamId,
        supplier: &str,
        a: &NodeId,
        b: &NodeId,
        (port_a, port_b): (Port, Port),
        rate_bps: u64,
        key_len: u32,
        label: SecurityExpr,
        suite_pairs: &[(String, String)],
        mode: PayloadMode,
        metric_prefix: String,
    ) {
        // Out-of-band key pre-distribution happens at build time.
        let keys = self.make_suites(suite_pairs);
        let (send, recv): (Vec<SendSuite>, Vec<RecvSuite>) =
            keys.into_iter().map(|k| (k.send, k.recv)).unzip();
        let defaults = &self.config.defaults;
        let mk_cfg = |local: &NodeId, peer: &NodeId, port: Port| ExchangeConfig {
            stream,
            supplier_id: supplier.to_string(),
            local: local.clone(),
            peer: peer.clone(),
            key_len,
            period: ExchangeConfig::period_for(rate_bps, key_len),
            validity: Duration::from_secs(defaults.validity_s),
            label: label.clone(),
            mode,
            ack_timeout: Duration::from_millis(defaults.ack_timeout_ms),
            port,
            metric_prefix: metric_prefix.clone(),
        };
        let ia = self.actor_idx[a];
        let ib = self.actor_idx[b];
        let cfg_a = mk_cfg(a, b, port_a);
        let cfg_b = mk_cfg(b, a, port_b);
        self.actors[ia]
            .exchanges
            .insert(stream, ExchangeRole::Initiator(Initiator::new(cfg_a, send)));
        self.actors[ib]
            .exchanges
            .insert(stream, ExchangeRole::Responder(Responder::new(cfg_b, recv)));
        self.actors[ia]
            .kms
            .register_supplier(b.clone(), supplier, key_len, rate_bps);
        self.actors[ib]
            .kms
            .register_supplier(a.clone(), supplier, key_len, rate_bps);
    }

    fn install_bridge(&mut self, pair: &str, a: &NodeId, b: &NodeId, inputs: Vec<String>) -> String {
        let supplier = bridge_supplier_id(&inputs);
        let tick = Duration::from_millis(self.config.defaults.bridge_tick_ms);
        for (node, peer) in [(a, b), (b, a)] {
            let idx = self.actor_idx[node];
            self.actors[idx].bridges.insert(pair.to_string(), Bridge::new(BridgeConfig {
                pair: pair.to_string(),
                peer: peer.clone(),
                inputs: inputs.clone(),
                tick,
                metric_prefix: format!("m12.{pair}"),
            }));
        }
        supplier
    }

    fn install_border_pair(
        &mut self,
        index: usize,
        p: &BorderPairConfig,
        channel_ids: &BTreeMap<String, ChannelId>,
        scope_of_node: &impl Fn(&BTreeMap<String, Controller>, &NodeId) -> String,
    ) -> Result<(), ConfigError> {
        let at = |field: &str| format!("border_pairs[{index}].{field}");
        let a: NodeId = p.a.parse().expect("validated");
        let b: NodeId = p.b.parse().expect("validated");
        self.method_of_pair.insert(p.name.clone(), p.method);
        let same_scope =
            scope_of_node(&self.controllers, &a) == scope_of_node(&self.controllers, &b);
        match p.method {
            1 => {
                let inputs: Vec<String> = p
                    .links
                    .iter()
                    .map(|lid| {
                        let id: LinkId = lid.parse().expect("validated");
                        self.link_info[&id].supplier.clone()
                    })
                    .collect();
                let channel = p.channel.clone().expect("validated");
                self.attach(channel_ids, &channel, &a, &b)?;
                let supplier = self.install_bridge(&p.name, &a, &b, inputs.clone());
                let label = self.bridge_label(&inputs);
                self.supplier_labels.insert(supplier.clone(), label);
                if same_scope {
                    return Err(ConfigError::new(
                        at("a"),
                        "method 1 bridges two controller scopes; endpoints share one",
                    ));
                }
                self.bridges.push(BorderBridge {
                    name: p.name.clone(),
                    a,
                    b,
                    supplier,
                    channel,
                });
            }
            2 => {
                let channel = p.channel.clone().expect("validated");
                let link_id: LinkId = p.link_id.as_ref().expect("validated").parse().expect("validated");
                let descriptor = LinkDescriptor::new(
                    link_id,
                    a.clone(),
                    b.clone(),
                    LinkType::Pqc,
                    p.rate_bps,
                    p.key_len,
                )
                .map_err(|e| ConfigError::new(at("link_id"), e.to_string()))?;
                let ports = self.attach(channel_ids, &channel, &a, &b)?;
                let mut suppliers = Vec::new();
                for (instance, suite) in p.suites.iter().enumerate() {
                    let supplier = format!("link:{}:{}", link_id, suite[0]);
                    let mut tags: BTreeSet<String> = p.sc_tags.iter().cloned().collect();
                    for s in [&suite[0], &suite[1]] {
                        tags.extend(self.config.suite_tags.get(s).cloned().unwrap_or_default());
                    }
                    let label = SecurityExpr::atom(SecurityLabel::new(SecurityBase::Mc, tags));
                    let stream = StreamId {
                        id: *link_id.as_bytes(),
                        instance: instance as u8,
                    };
                    self.install_exchange(
                        stream,
                        &supplier,
                        &a,
                        &b,
                        ports,
                        p.rate_bps,
                        p.key_len,
                        label.clone(),
                        &[(suite[0].clone(), suite[1].clone())],
                        PayloadMode::CrossCheck,
                        format!("link.{supplier}"),
                    );
                    self.supplier_labels.insert(supplier.clone(), label.clone());
                    suppliers.push(supplier);
                }
                let supplier = self.install_bridge(&p.name, &a, &b, suppliers.clone());
                let label = self.bridge_label(&suppliers);
                self.supplier_labels.insert(supplier.clone(), label);
                // The controller manages this as just another link, with
                // the link-type property saying PQC.
                if same_scope {
                    let scope = scope_of_node(&self.controllers, &a);
                    self.controllers
                        .get_mut(&scope)
                        .expect("scope exists")
                        .add_link(descriptor)
                        .map_err(|e| ConfigError::new(at("link_id"), e.to_string()))?;
                    self.link_info.insert(link_id, LinkRouteInfo {
                        supplier: bridge_supplier_id(&[
                            format!("link:{}:{}", link_id, p.suites[0][0]),
                            format!("link:{}:{}", link_id, p.suites[1][0]),
                        ]),
                        channel,
                    });
                } else {
                    self.bridges.push(BorderBridge {
                        name: p.name.clone(),
                        a,
                        b,
                        supplier: bridge_supplier_id(&[
                            format!("link:{}:{}", link_id, p.suites[0][0]),
                            format!("link:{}:{}", link_id, p.suites[1][0]),
                        ]),
                        channel,
                    });
                }
            }
            3 => {
                let channel = p.channel.clone().expect("validated");
                let ports = self.attach(channel_ids, &channel, &a, &b)?;
                let supplier = format!("m3:{}", p.name);
                let label = self.dual_suite_label(&p.suites, &p.sc_tags);
                let stream = StreamId {
                    id: crypto::hash128("qsnet.m3stream", &[p.name.as_bytes()]),
                    instance: 0,
                };
                let suite_pairs: Vec<(String, String)> = p
                    .suites
                    .iter()
                    .map(|s| (s[0].clone(), s[1].clone()))
                    .collect();
                self.install_exchange(
                    stream,
                    &supplier,
                    &a,
                    &b,
                    ports,
                    p.rate_bps,
                    p.key_len,
                    label.clone(),
                    &suite_pairs,
                    p.mode.unwrap_or_default(),
                    format!("m3.{}", p.name),
                );
                self.supplier_labels.insert(supplier.clone(), label);
                if same_scope {
                    return Err(ConfigError::new(
                        at("a"),
                        "method 3 bridges two controller scopes; endpoints share one",
                    ));
                }
                self.bridges.push(BorderBridge {
                    name: p.name.clone(),
                    a,
                    b,
                    supplier,
                    channel,
                });
            }
            4 => {
                let ground_channel = p.ground_channel.clone().expect("validated");
                let space_channel = p.space_channel.clone().expect("validated");
                let ground_ports = self.attach(channel_ids, &ground_channel, &a, &b)?;
                let space_ports = self.attach(channel_ids, &space_channel, &a, &b)?;
                let supplier = format!("m4:{}", p.name);
                let space_suite = p.space_suite.clone().expect("validated");
                let ground_suite = p.ground_suite.clone().expect("validated");
                let space_label = self.path_label(&space_suite, &p.space_sc_tags);
                let ground_label = self.path_label(&ground_suite, &p.ground_sc_tags);
                let label = space_label.parallel(&ground_label);
                let psk = match &p.psk {
                    Some(name) => Psk::new(hex::decode(&self.config.psks[name]).expect("validated"))
                        .expect("validated"),
                    None => Psk::empty(),
                };
                let mut keys =
                    self.make_suites(&[
                        (space_suite[0].clone(), space_suite[1].clone()),
                        (ground_suite[0].clone(), ground_suite[1].clone()),
                    ]);
                let ground_keys = keys.pop().expect("two");
                let space_keys = keys.pop().expect("two");
                let cfg = M4Config {
                    pair: p.name.clone(),
                    peer: b.clone(),
                    supplier_id: supplier.clone(),
                    key_len: p.key_len,
                    block_size: p.block_size,
                    block_interval: Duration::from_millis(p.block_interval_ms),
                    ttl: Duration::from_millis(p.ttl_ms),
                    ack_timeout: Duration::from_millis(self.config.defaults.ack_timeout_ms),
                    psk,
                    kdf: p.kdf.unwrap_or_default(),
                    validity: Duration::from_secs(self.config.defaults.validity_s),
                    label: label.clone(),
                    metric_prefix: format!("m4.{}", p.name),
                };
                let ia = self.actor_idx[&a];
                let ib = self.actor_idx[&b];
                self.actors[ia].m4_senders.insert(
                    p.name.clone(),
                    M4Sender::new(
                        cfg.clone(),
                        M4PathConfig {
                            suite: space_keys.send,
                            port: space_ports.0,
                        },
                        M4PathConfig {
                            suite: ground_keys.send,
                            port: ground_ports.0,
                        },
                    ),
                );
                let mut recv_cfg = cfg;
                recv_cfg.peer = a.clone();
                self.actors[ib].m4_receivers.insert(
                    p.name.clone(),
                    M4Receiver::new(
                        recv_cfg,
                        M4RecvPathConfig {
                            suite: space_keys.recv,
                            port: space_ports.1,
                        },
                        M4RecvPathConfig {
                            suite: ground_keys.recv,
                            port: ground_ports.1,
                        },
                    ),
                );
                self.actors[ia]
                    .kms
                    .register_supplier(b.clone(), &supplier, p.key_len, 0);
                self.actors[ib]
                    .kms
                    .register_supplier(a.clone(), &supplier, p.key_len, 0);
                self.supplier_labels.insert(supplier.clone(), label);
                if same_scope {
                    return Err(ConfigError::new(
                        at("a"),
                        "method 4 bridges two controller scopes; endpoints share one",
                    ));
                }
                // Relay traffic across this pair rides the ground path.
                self.bridges.push(BorderBridge {
                    name: p.name.clone(),
                    a,
                    b,
                    supplier,
                    channel: ground_channel,
                });
            }
            _ => unreachable!("validated"),
        }
        Ok(())
    }

    /// Parallel combination of the input streams' labels; the kms
    /// recomputes the same expression at hybridization time.
    fn bridge_label(&self, inputs: &[String]) -> SecurityExpr {
        let mut exprs = inputs
            .iter()
            .filter_map(|s| self.supplier_labels.get(s).cloned());
        let first = exprs.next().expect("bridge inputs have labels");
        exprs.fold(first, |acc, e| acc.parallel(&e))
    }

    fn dual_suite_label(&self, suites: &[[String; 2]], extra: &[String]) -> SecurityExpr {
        let mut label = self.path_label(&suites[0], extra);
        for s in &suites[1..] {
            label = label.parallel(&self.path_label(s, extra));
        }
        label
    }

    fn path_label(&self, suite: &[String; 2], extra: &[String]) -> SecurityExpr {
        let mut tags: BTreeSet<String> = extra.iter().cloned().collect();
        for s in suite {
            tags.extend(self.config.suite_tags.get(s).cloned().unwrap_or_default());
        }
        SecurityExpr::atom(SecurityLabel::new(SecurityBase::Mc, tags))
    }

    fn with_ctx<R>(&mut self, idx: usize, f: impl FnOnce(&mut NodeActor, &mut Ctx) -> R) -> R {
        let mut ctx = Ctx {
            now: self.now,
            self_actor: idx,
            rng: &mut self.rng,
            net: &mut self.net,
            queue: &mut self.queue,
            metrics: &mut self.metrics,
            registry: &self.registry,
        };
        f(&mut self.actors[idx], &mut ctx)
    }

    /// Run to the script horizon and build the report.
    pub fn run(&mut self) -> Report {
        // The world RNG replaces the placeholder now that building is done.
        for i in 0..self.script.actions.len() {
            let at = SimTime::from_millis(self.script.actions[i].at_ms);
            self.queue.push(at, EventKind::Script(i));
        }
        for idx in 0..self.actors.len() {
            self.with_ctx(idx, |actor, ctx| actor.start(ctx));
        }
        let wall_anchor = std::time::Instant::now();
        while let Some((at, kind)) = self.queue.pop() {
            if at > self.duration {
                break;
            }
            if self.wall_clock {
                let target = Duration::from_nanos(at.as_nanos());
                let elapsed = wall_anchor.elapsed();
                if target > elapsed {
                    std::thread::sleep(target - elapsed);
                }
            }
            self.now = at;
            match kind {
                EventKind::Deliver { delivery, bytes } => {
                    if !self.net.deliverable(&delivery) {
                        continue;
                    }
                    self.net.record_delivery(&delivery, &bytes);
                    let Some(&idx) = self
                        .attachments
                        .get(&(delivery.channel, delivery.to_end))
                    else {
                        continue;
                    };
                    let port = Port {
                        channel: delivery.channel,
                        end: delivery.to_end,
                    };
                    self.with_ctx(idx, |actor, ctx| actor.on_message(ctx, port, &bytes));
                }
                EventKind::Timer { actor, tag } => {
                    self.with_ctx(actor, |a, ctx| a.on_timer(ctx, tag));
                }
                EventKind::Script(i) => {
                    let action = self.script.actions[i].action.clone();
                    self.handle_action(action);
                }
            }
        }
        self.now = self.duration;
        self.finalize();
        self.build_report()
    }

    /// Orchestrated end-to-end key request: controllers compute their
    /// segments, the source draws the payload, the relay executes.
    pub fn request_e2e_key(&mut self, source: &NodeId, destination: &NodeId, length: u32) -> KeyId {
        let e2e_key_id = KeyId::random(&mut self.rng);
        let mut payload = vec![0u8; length as usize];
        self.rng.fill_bytes(&mut payload);
        self.metrics
            .begin_e2e(e2e_key_id, source.clone(), destination.clone(), self.now);
        let now_s = self.now.as_secs();
        let plan = {
            let actors = &self.actors;
            let actor_idx = &self.actor_idx;
            let link_info = &self.link_info;
            plan_e2e_route(
                &self.controllers,
                &self.bridges,
                link_info,
                source,
                destination,
                |link, wrapper| {
                    let Some(info) = link_info.get(&link.link_id) else {
                        return false;
                    };
                    let Some(other) = link.other_endpoint(wrapper) else {
                        return false;
                    };
                    let idx = actor_idx[wrapper];
                    actors[idx].kms.unconsumed_count(
                        other,
                        &info.supplier,
                        Some(length),
                        Some(pad_parity_for(wrapper, other)),
                        now_s,
                    ) > 0
                },
            )
        };
        let plan = match plan {
            Ok(plan) => plan,
            Err(e) => {
                self.metrics.fail_e2e(e2e_key_id, &e.to_string());
                self.metrics.inc("relay.plan_failed");
                return e2e_key_id;
            }
        };
        let validity_s = self.config.defaults.validity_s;
        let validity = ValidityWindow::new(now_s, now_s + validity_s).expect("window");
        let payload = KeyMaterial::new(payload).expect("validated length");
        let idx = self.actor_idx[source];
        let destination = destination.clone();
        let result = self.with_ctx(idx, |actor, ctx| {
            let hops = plan.hops.clone();
            actor.relay.initiate(
                ctx,
                &mut actor.kms,
                &actor.ports,
                e2e_key_id,
                payload,
                destination,
                validity,
                hops,
            )
        });
        if let Err(e) = result {
            self.metrics.fail_e2e(e2e_key_id, &e.to_string());
            self.metrics.inc("relay.failed");
        }
        e2e_key_id
    }

    fn handle_action(&mut self, action: Action) {
        match action {
            Action::RequestE2eKey {
                source,
                destination,
                length,
            } => {
                let source: NodeId = source.parse().expect("validated");
                let destination: NodeId = destination.parse().expect("validated");
                self.request_e2e_key(&source, &destination, length);
            }
            Action::Kill { channel } => {
                let _ = self.net.kill(&channel);
                self.metrics.inc("script.kill");
            }
            Action::Heal { channel } => {
                let _ = self.net.heal(&channel);
                self.metrics.inc("script.heal");
            }
            Action::Drain {
                node,
                peer,
                count,
                size,
            } => {
                let node: NodeId = node.parse().expect("validated");
                let peer: NodeId = peer.parse().expect("validated");
                let idx = self.actor_idx[&node];
                let now_s = self.now.as_secs();
                let kms = &mut self.actors[idx].kms;
                match kms.get_key_014(&node, &peer, count, size, now_s) {
                    Ok(keys) => self.metrics.add("script.drained", keys.len() as u64),
                    Err(e) => {
                        self.metrics.inc("script.drain_failed");
                        log::info!("drain at {node} failed: {e}");
                    }
                }
            }
        }
    }

    /// Collect end-of-run state the counters cannot see.
    fn finalize(&mut self) {
        for actor in &self.actors {
            for (pair, sender) in &actor.m4_senders {
                self.metrics
                    .add(&format!("m4.{pair}.pending"), sender.pending_len() as u64);
            }
            for (pair, receiver) in &actor.m4_receivers {
                self.metrics.add(
                    &format!("m4.{pair}.recv.queue"),
                    receiver.queue_len() as u64,
                );
            }
            for role in actor.exchanges.values() {
                if let ExchangeRole::Initiator(i) = role {
                    if i.has_pending() {
                        self.metrics
                            .add(&format!("{}.pending", i.cfg.metric_prefix), 1);
                    }
                }
            }
        }
    }

    fn build_report(&self) -> Report {
        let c = |k: &str| self.metrics.counter(k);
        let duration_s = self.duration.as_secs_f64().max(f64::MIN_POSITIVE);
        let mut links = BTreeMap::new();
        for (supplier, label) in &self.supplier_labels {
            if !supplier.starts_with("link:") {
                continue;
            }
            let prefix = format!("link.{supplier}");
            let delivered = c(&format!("{prefix}.delivered"));
            links.insert(supplier.clone(), LinkReport {
                delivered,
                lost: c(&format!("{prefix}.lost")),
                rate_keys_per_s: delivered as f64 / duration_s,
                label: label.to_string(),
            });
        }
        let mut methods = BTreeMap::new();
        for (pair, &method) in &self.method_of_pair {
            let report = match method {
                1 | 2 => {
                    let prefix = format!("m12.{pair}");
                    MethodReport {
                        method,
                        produced: c(&format!("{prefix}.produced")),
                        sent: 0,
                        delivered: 0,
                        lost: 0,
                        pending: 0,
                        dos_events: 0,
                        replays: 0,
                    }
                }
                3 => {
                    let prefix = format!("m3.{pair}");
                    MethodReport {
                        method,
                        produced: 0,
                        sent: c(&format!("{prefix}.sent")),
                        delivered: c(&format!("{prefix}.delivered")),
                        lost: c(&format!("{prefix}.lost")),
                        pending: c(&format!("{prefix}.pending")),
                        dos_events: c(&format!("{prefix}.recv.dos")),
                        replays: c(&format!("{prefix}.recv.replay")),
                    }
                }
                _ => {
                    let prefix = format!("m4.{pair}");
                    MethodReport {
                        method,
                        produced: 0,
                        sent: c(&format!("{prefix}.sent")),
                        delivered: c(&format!("{prefix}.delivered")),
                        lost: c(&format!("{prefix}.lost")),
                        pending: c(&format!("{prefix}.pending")),
                        dos_events: c(&format!("{prefix}.recv.dos")),
                        replays: c(&format!("{prefix}.recv.replay")),
                    }
                }
            };
            methods.insert(pair.clone(), report);
        }
        let mut stores = BTreeMap::new();
        for actor in &self.actors {
            let counts = actor.kms.supplier_counts();
            let entries: u64 = counts.values().map(|(t, _)| t).sum();
            let consumed: u64 = counts.values().map(|(_, u)| u).sum();
            stores.insert(actor.node.to_string(), StoreReport {
                entries,
                consumed,
                integrity_alarms: actor.kms.integrity_alarms(),
            });
        }
        Report {
            seed: self.config.seed,
            duration_ns: self.duration.as_nanos(),
            links,
            methods,
            e2e: self.metrics.e2e.clone(),
            stores,
            counters: self.metrics.counters.clone(),
            trace_hash: self.net.trace_hash(),
        }
    }

    // --- inspection ---

    pub fn listing(&self, node: &NodeId) -> Result<Vec<ListingRow>, ConfigError> {
        let idx = self
            .actor_idx
            .get(node)
            .ok_or_else(|| ConfigError::new("node", format!("unknown node '{node}'")))?;
        Ok(self.actors[*idx].kms.listing(self.now.as_secs()))
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.net.trace().iter().map(|r| r.line()).collect()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.actors.iter().map(|a| a.node.clone()).collect()
    }

    pub fn actor(&self, node: &NodeId) -> Option<&NodeActor> {
        self.actor_idx.get(node).map(|&i| &self.actors[i])
    }

    pub fn actor_mut(&mut self, node: &NodeId) -> Option<&mut NodeActor> {
        self.actor_idx.get(node).copied().map(|i| &mut self.actors[i])
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// 014-style loopback request against one node's store, as an
    /// application co-located with the node would issue it.
    pub fn kms_request(&mut self, node: &NodeId, request_bytes: &[u8]) -> Option<Vec<u8>> {
        let idx = self.actor_idx.get(node)?;
        let now_s = self.now.as_secs();
        Some(kms::proto::handle_request_bytes(
            &mut self.actors[*idx].kms,
            request_bytes,
            now_s,
        ))
    }

    pub fn open_app_session(
        &mut self,
        node: &NodeId,
        source: NodeId,
        destination: NodeId,
        qos: KeyQos,
        ksid: Option<KeyId>,
    ) -> Result<KeyId, kms::KmsError> {
        let idx = self.actor_idx[node];
        let now_s = self.now.as_secs();
        self.actors[idx]
            .kms
            .open_connect(source, destination, qos, ksid, now_s)
    }
}
