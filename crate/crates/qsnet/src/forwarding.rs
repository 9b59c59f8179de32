//! Hop-by-hop key relay over trusted-node chains, and the in-process
//! SDN-style controllers that configure relay paths inside a domain.
//!
//! Controllers never talk to foreign controllers; a cross-domain route
//! is stitched from per-domain segments joined at border-node bridges.
//! The relay itself re-wraps at every hop: the wrapping side consumes
//! the lowest unconsumed link key of its half of the stream, the
//! unwrapping side retrieves that exact key by id, and the plaintext
//! payload is erased as soon as it has been re-wrapped. The end-to-end
//! key's label is the serial composition of every pad's label.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Duration;

use thiserror::Error;

use crate::core::{KeyEntry, KeyId, KeyMaterial, LinkDescriptor, LinkId, NodeId, PathSpec,
    ValidationError, ValidityWindow};
use crate::crypto::{self, hash128};
use crate::kms::{pad_parity_for, ConsumePurpose, KeyStore, KmsError};

use crate::node::messages::{NetMessage, RelayHop, RelayMsg};
use crate::node::{Ctx, Port, TimerTag};
use crate::seclevel::SecurityExpr;

pub const E2E_SUPPLIER: &str = "e2e";
pub const HOP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForwardingError {
    #[error("node {node} is not managed by controller of domain '{domain}'")]
    NotInDomain { node: NodeId, domain: String },
    #[error("no path from {src} to {dst}")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("no border route from domain '{from}' to domain '{to}'")]
    NoBorderRoute { from: String, to: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Per-domain controller: topology of intra-domain links plus the
/// border nodes it may route toward. Only configures its own nodes.
#[derive(Debug, Clone)]
pub struct Controller {
    pub domain: String,
    pub nodes: BTreeSet<NodeId>,
    pub border_nodes: BTreeSet<NodeId>,
    pub topology: BTreeMap<LinkId, LinkDescriptor>,
}

impl Controller {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            nodes: BTreeSet::new(),
            border_nodes: BTreeSet::new(),
            topology: BTreeMap::new(),
        }
    }

    pub fn add_node(&mut self, node: NodeId, border: bool) {
        if border {
            self.border_nodes.insert(node.clone());
        }
        self.nodes.insert(node);
    }

    /// Register a link whose endpoints this controller manages.
    pub fn add_link(&mut self, link: LinkDescriptor) -> Result<(), ForwardingError> {
        for ep in [&link.endpoint_a, &link.endpoint_b] {
            if !self.nodes.contains(ep) {
                return Err(ForwardingError::NotInDomain {
                    node: ep.clone(),
                    domain: self.domain.clone(),
                });
            }
        }
        self.topology.insert(link.link_id, link);
        Ok(())
    }

    /// Shortest path by hop count over links with available key
    /// material; equal-length candidates resolve to the one whose link
    /// id sequence is lexicographically smallest.
    pub fn compute_path(
        &self,
        source: &NodeId,
        target: &NodeId,
        mut link_usable: impl FnMut(&LinkDescriptor, &NodeId) -> bool,
    ) -> Result<PathSpec, ForwardingError> {
        for n in [source, target] {
            if !self.nodes.contains(n) {
                return Err(ForwardingError::NotInDomain {
                    node: n.clone(),
                    domain: self.domain.clone(),
                });
            }
        }
        if source == target {
            return Err(ForwardingError::Unreachable {
                src: source.clone(),
                dst: target.clone(),
            });
        }
        // Dijkstra on (hop count, link id sequence): the composite key
        // makes the deterministic tie-break part of the distance.
        type Dist = (usize, Vec<LinkId>);
        let mut best: BTreeMap<NodeId, Dist> = BTreeMap::new();
        let mut heap: BinaryHeap<Reverse<(usize, Vec<LinkId>, NodeId)>> = BinaryHeap::new();
        heap.push(Reverse((0, Vec::new(), source.clone())));
        while let Some(Reverse((hops, links, at))) = heap.pop() {
            if let Some((bh, bl)) = best.get(&at) {
                if (*bh, bl) <= (hops, &links) {
                    continue;
                }
            }
            best.insert(at.clone(), (hops, links.clone()));
            if at == *target {
                continue;
            }
            for link in self.topology.values() {
                let Some(next) = link.other_endpoint(&at) else {
                    continue;
                };
                if !link_usable(link, &at) {
                    continue;
                }
                let mut next_links = links.clone();
                next_links.push(link.link_id);
                let cand = (hops + 1, next_links);
                let better = match best.get(next) {
                    None => true,
                    Some((bh, bl)) => (cand.0, &cand.1) < (*bh, bl),
                };
                if better {
                    heap.push(Reverse((cand.0, cand.1, next.clone())));
                }
            }
        }
        let (_, links) = best.remove(target).ok_or(ForwardingError::Unreachable {
            src: source.clone(),
            dst: target.clone(),
        })?;
        // Reconstruct the hop list by walking the link sequence.
        let mut hops = vec![source.clone()];
        for link_id in &links {
            let link = &self.topology[link_id];
            let here = hops.last().expect("non-empty");
            hops.push(link.other_endpoint(here).expect("on path").clone());
        }
        Ok(PathSpec::new(hops, links, BTreeSet::new())?)
    }
}

/// One configured border bridge between two domains, as the route
/// planner sees it.
#[derive(Debug, Clone)]
pub struct BorderBridge {
    pub name: String,
    pub a: NodeId,
    pub b: NodeId,
    pub supplier: String,
    pub channel: String,
}

impl BorderBridge {
    /// Synthetic link id standing in for the crossing in a `PathSpec`.
    pub fn path_link_id(&self) -> LinkId {
        LinkId::from_bytes(hash128("qsnet.pairlink", &[self.name.as_bytes()]))
    }
}

/// A fully stitched relay route: the path for the books, the hop plan
/// for execution.
#[derive(Debug, Clone)]
pub struct RelayPlan {
    pub path: PathSpec,
    pub hops: Vec<RelayHop>,
}

/// Everything the planner needs to name a link hop: supplier id and
/// channel of each intra-domain link.
#[derive(Debug, Clone)]
pub struct LinkRouteInfo {
    pub supplier: String,
    pub channel: String,
}

/// Stitch an end-to-end route: source domain segment, border crossings,
/// destination domain segment. Foreign segments are computed by the
/// foreign controller only.
pub fn plan_e2e_route(
    controllers: &BTreeMap<String, Controller>,
    bridges: &[BorderBridge],
    link_info: &BTreeMap<LinkId, LinkRouteInfo>,
    source: &NodeId,
    destination: &NodeId,
    mut link_usable: impl FnMut(&LinkDescriptor, &NodeId) -> bool,
) -> Result<RelayPlan, ForwardingError> {
    let domain_of = |node: &NodeId| -> Result<&str, ForwardingError> {
        controllers
            .values()
            .find(|c| c.nodes.contains(node))
            .map(|c| c.domain.as_str())
            .ok_or_else(|| ForwardingError::NotInDomain {
                node: node.clone(),
                domain: "<any>".into(),
            })
    };
    let src_domain = domain_of(source)?.to_string();
    let dst_domain = domain_of(destination)?.to_string();

    let crossings = if src_domain == dst_domain {
        Vec::new()
    } else {
        plan_domain_route(controllers, bridges, &src_domain, &dst_domain)?
    };

    let mut hops: Vec<RelayHop> = Vec::new();
    let mut path_hops: Vec<NodeId> = vec![source.clone()];
    let mut path_links: Vec<LinkId> = Vec::new();
    let mut crossing_idx: BTreeSet<u32> = BTreeSet::new();
    let mut current = source.clone();
    let mut current_domain = src_domain;

    let extend_segment = |hops: &mut Vec<RelayHop>,
                              path_hops: &mut Vec<NodeId>,
                              path_links: &mut Vec<LinkId>,
                              controller: &Controller,
                              from: &NodeId,
                              to: &NodeId,
                              link_usable: &mut dyn FnMut(&LinkDescriptor, &NodeId) -> bool|
     -> Result<(), ForwardingError> {
        if from == to {
            return Ok(());
        }
        let segment = controller.compute_path(from, to, &mut *link_usable)?;
        for (i, link_id) in segment.links.iter().enumerate() {
            let info = link_info
                .get(link_id)
                .ok_or_else(|| ForwardingError::Unreachable {
                    src: from.clone(),
                    dst: to.clone(),
                })?;
            hops.push(RelayHop {
                from: segment.hops[i].clone(),
                to: segment.hops[i + 1].clone(),
                supplier: info.supplier.clone(),
                channel: info.channel.clone(),
            });
            path_hops.push(segment.hops[i + 1].clone());
            path_links.push(*link_id);
        }
        Ok(())
    };

    for bridge in &crossings {
        // Orient the bridge: near end in the current domain.
        let (near, far) = if domain_of(&bridge.a)? == current_domain {
            (bridge.a.clone(), bridge.b.clone())
        } else {
            (bridge.b.clone(), bridge.a.clone())
        };
        let controller = &controllers[&current_domain];
        extend_segment(
            &mut hops,
            &mut path_hops,
            &mut path_links,
            controller,
            &current,
            &near,
            &mut link_usable,
        )?;
        crossing_idx.insert(path_links.len() as u32);
        hops.push(RelayHop {
            from: near.clone(),
            to: far.clone(),
            supplier: bridge.supplier.clone(),
            channel: bridge.channel.clone(),
        });
        path_hops.push(far.clone());
        path_links.push(bridge.path_link_id());
        current_domain = domain_of(&far)?.to_string();
        current = far;
    }
    let controller = &controllers[&current_domain];
    extend_segment(
        &mut hops,
        &mut path_hops,
        &mut path_links,
        controller,
        &current,
        destination,
        &mut link_usable,
    )?;

    let path = PathSpec::new(path_hops, path_links, crossing_idx)?;
    Ok(RelayPlan { path, hops })
}

/// Breadth-first search over the domain graph, bridges sorted by name
/// for a deterministic choice among equals.
fn plan_domain_route<'a>(
    controllers: &BTreeMap<String, Controller>,
    bridges: &'a [BorderBridge],
    from: &str,
    to: &str,
) -> Result<Vec<&'a BorderBridge>, ForwardingError> {
    let domain_of = |node: &NodeId| {
        controllers
            .values()
            .find(|c| c.nodes.contains(node))
            .map(|c| c.domain.as_str())
    };
    let mut sorted: Vec<&BorderBridge> = bridges.iter().collect();
    sorted.sort_by(|x, y| x.name.cmp(&y.name));

    let mut parents: BTreeMap<String, (String, &BorderBridge)> = BTreeMap::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(from.to_string());
    let mut seen = BTreeSet::from([from.to_string()]);
    while let Some(domain) = queue.pop_front() {
        if domain == to {
            let mut chain = Vec::new();
            let mut at = to.to_string();
            while at != from {
                let (prev, bridge) = parents[&at].clone();
                chain.push(bridge);
                at = prev;
            }
            chain.reverse();
            return Ok(chain);
        }
        for bridge in &sorted {
            let (da, db) = match (domain_of(&bridge.a), domain_of(&bridge.b)) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            let next = if da == domain {
                db
            } else if db == domain {
                da
            } else {
                continue;
            };
            if seen.insert(next.to_string()) {
                parents.insert(next.to_string(), (domain.clone(), bridge));
                queue.push_back(next.to_string());
            }
        }
    }
    Err(ForwardingError::NoBorderRoute {
        from: from.to_string(),
        to: to.to_string(),
    })
}

// --- relay execution ---

#[derive(Debug)]
struct OriginState {
    payload: KeyMaterial,
    destination: NodeId,
    validity: ValidityWindow,
}

#[derive(Debug)]
struct PendingRelay {
    upstream: Option<Port>,
    origin: Option<OriginState>,
}

/// Per-node relay state: every in-flight transfer this node forwarded
/// and still owes an acknowledgment for.
#[derive(Debug)]
pub struct RelayEngine {
    node: NodeId,
    pending: BTreeMap<KeyId, PendingRelay>,
}

impl RelayEngine {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            pending: BTreeMap::new(),
        }
    }

    fn ensure_e2e_supplier(kms: &mut KeyStore, peer: &NodeId, key_len: u32) {
        if !kms.supplier_registered(peer, E2E_SUPPLIER) {
            kms.register_supplier(peer.clone(), E2E_SUPPLIER, key_len, 0);
        }
    }

    /// Origin side: wrap the fresh payload for the first hop and send.
    pub fn initiate(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        ports: &BTreeMap<String, Port>,
        e2e_key_id: KeyId,
        payload: KeyMaterial,
        destination: NodeId,
        validity: ValidityWindow,
        hops: Vec<RelayHop>,
    ) -> Result<(), KmsError> {
        assert!(!hops.is_empty(), "relay needs at least one hop");
        assert_eq!(hops[0].from, self.node, "plan must start here");
        let first = hops[0].clone();
        let pad = kms.consume_lowest(
            &first.to,
            &first.supplier,
            Some(payload.len() as u32),
            Some(pad_parity_for(&self.node, &first.to)),
            ConsumePurpose::RelayPad,
            ctx.now_s(),
        )?;
        let wrapped = crypto::otp_wrap(&payload, &pad.key).expect("pad length matches");
        let label = pad.label.clone();
        let port = ports.get(&first.channel).copied().ok_or_else(|| {
            KmsError::Validation(ValidationError::new(
                "route",
                format!("unknown channel '{}'", first.channel),
            ))
        })?;
        let remaining = hops.len() as u32;
        ctx.send(port, &NetMessage::Relay(RelayMsg {
            e2e_key_id,
            origin: self.node.clone(),
            destination: destination.clone(),
            validity,
            hop_index: 0,
            route: hops,
            wrapped,
            pad_supplier: first.supplier,
            pad_key_id: pad.key_id,
            label_so_far: label,
        }));
        self.pending.insert(e2e_key_id, PendingRelay {
            upstream: None,
            origin: Some(OriginState {
                payload,
                destination,
                validity,
            }),
        });
        // The guard covers the full round trip of the remaining chain.
        ctx.set_timer(HOP_TIMEOUT * (2 * remaining), TimerTag::RelayGuard(e2e_key_id));
        ctx.inc("relay.initiated");
        Ok(())
    }

    pub fn on_relay(
        &mut self,
        ctx: &mut Ctx,
        kms: &mut KeyStore,
        ports: &BTreeMap<String, Port>,
        msg: RelayMsg,
        arrival: Port,
    ) {
        let hop_index = msg.hop_index as usize;
        let Some(hop) = msg.route.get(hop_index) else {
            ctx.inc("relay.misrouted");
            return;
        };
        if hop.to != self.node {
            ctx.inc("relay.misrouted");
            return;
        }
        // Retrieve the exact pad the wrapping side consumed.
        let pad = match kms.consume_by_id(
            &hop.from,
            &msg.pad_supplier,
            msg.pad_key_id,
            ConsumePurpose::RelayPad,
            ctx.now_s(),
        ) {
            Ok(pad) => pad,
            Err(e) => {
                ctx.inc("relay.pad_missing");
                self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index, &e.to_string());
                return;
            }
        };
        let payload = match crypto::otp_unwrap(&msg.wrapped, &pad.key) {
            Ok(p) => p,
            Err(e) => {
                ctx.inc("relay.bad_wrap");
                self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index, &e.to_string());
                return;
            }
        };
        let is_last = hop_index + 1 == msg.route.len();
        if is_last && msg.destination == self.node {
            Self::ensure_e2e_supplier(kms, &msg.origin, payload.len() as u32);
            let entry = KeyEntry::new(
                msg.e2e_key_id,
                payload,
                msg.origin.clone(),
                E2E_SUPPLIER,
                msg.validity,
                msg.label_so_far.clone(),
            )
            .expect("entry");
            match kms.push_key(E2E_SUPPLIER, entry) {
                Ok(_) => {
                    ctx.inc("relay.delivered");
                    ctx.send(arrival, &NetMessage::RelayAck {
                        e2e_key_id: msg.e2e_key_id,
                        label: msg.label_so_far,
                    });
                }
                Err(e) => {
                    ctx.inc("relay.error");
                    self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index, &e.to_string());
                }
            }
            return;
        }
        if is_last {
            ctx.inc("relay.misrouted");
            self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index, "route exhausted");
            return;
        }
        // Trusted-node re-wrap for the next hop.
        let next = &msg.route[hop_index + 1];
        if next.from != self.node {
            ctx.inc("relay.misrouted");
            self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index, "plan discontinuity");
            return;
        }
        let next_pad = match kms.consume_lowest(
            &next.to,
            &next.supplier,
            Some(payload.len() as u32),
            Some(pad_parity_for(&self.node, &next.to)),
            ConsumePurpose::RelayPad,
            ctx.now_s(),
        ) {
            Ok(pad) => pad,
            Err(e) => {
                // Pads consumed on completed hops stay burned.
                ctx.inc("relay.pad_missing");
                self.nak(
                    ctx,
                    arrival,
                    msg.e2e_key_id,
                    msg.hop_index + 1,
                    &e.to_string(),
                );
                return;
            }
        };
        let wrapped = crypto::otp_wrap(&payload, &next_pad.key).expect("length checked");
        // Erase the plaintext before anything else happens on this node.
        let mut plain = payload.into_bytes();
        plain.fill(0);
        drop(plain);
        let label = msg.label_so_far.serial(&next_pad.label);
        let Some(port) = ports.get(&next.channel).copied() else {
            ctx.inc("relay.error");
            self.nak(ctx, arrival, msg.e2e_key_id, msg.hop_index + 1, "unknown channel");
            return;
        };
        let remaining = (msg.route.len() - hop_index) as u32;
        let e2e_key_id = msg.e2e_key_id;
        ctx.send(port, &NetMessage::Relay(RelayMsg {
            hop_index: msg.hop_index + 1,
            wrapped,
            pad_supplier: next.supplier.clone(),
            pad_key_id: next_pad.key_id,
            label_so_far: label,
            ..msg
        }));
        self.pending.insert(e2e_key_id, PendingRelay {
            upstream: Some(arrival),
            origin: None,
        });
        ctx.set_timer(HOP_TIMEOUT * (2 * remaining), TimerTag::RelayGuard(e2e_key_id));
        ctx.inc("relay.forwarded");
    }

    fn nak(&self, ctx: &mut Ctx, to: Port, e2e_key_id: KeyId, failed_hop: u32, reason: &str) {
        ctx.send(to, &NetMessage::RelayNak {
            e2e_key_id,
            failed_hop,
            reason: reason.to_string(),
        });
    }

    pub fn on_ack(&mut self, ctx: &mut Ctx, kms: &mut KeyStore, e2e_key_id: KeyId, label: SecurityExpr) {
        let Some(pending) = self.pending.remove(&e2e_key_id) else {
            ctx.inc("relay.stale_ack");
            return;
        };
        match pending.origin {
            Some(origin) => {
                // End-to-end acknowledgment: the origin commits the very
                // same entry the destination stored.
                Self::ensure_e2e_supplier(kms, &origin.destination, origin.payload.len() as u32);
                let entry = KeyEntry::new(
                    e2e_key_id,
                    origin.payload,
                    origin.destination,
                    E2E_SUPPLIER,
                    origin.validity,
                    label.clone(),
                )
                .expect("entry");
                match kms.push_key(E2E_SUPPLIER, entry) {
                    Ok(_) => {
                        ctx.inc("relay.completed");
                        let label = label.to_string();
                        ctx.metrics.complete_e2e(e2e_key_id, ctx.now, label);
                    }
                    Err(e) => {
                        ctx.inc("relay.error");
                        log::warn!("relay {e2e_key_id} origin push: {e}");
                    }
                }
            }
            None => {
                if let Some(upstream) = pending.upstream {
                    ctx.send(upstream, &NetMessage::RelayAck { e2e_key_id, label });
                }
            }
        }
    }

    pub fn on_nak(&mut self, ctx: &mut Ctx, e2e_key_id: KeyId, failed_hop: u32, reason: &str) {
        let Some(pending) = self.pending.remove(&e2e_key_id) else {
            ctx.inc("relay.stale_nak");
            return;
        };
        match pending.origin {
            Some(_) => {
                ctx.inc("relay.failed");
                ctx.metrics
                    .fail_e2e(e2e_key_id, &format!("hop {failed_hop}: {reason}"));
            }
            None => {
                if let Some(upstream) = pending.upstream {
                    self.nak(ctx, upstream, e2e_key_id, failed_hop, reason);
                }
            }
        }
    }

    /// Per-hop timeout: still pending after the guard means the chain
    /// below never answered.
    pub fn on_guard(&mut self, ctx: &mut Ctx, _kms: &mut KeyStore, e2e_key_id: KeyId) {
        let Some(pending) = self.pending.remove(&e2e_key_id) else {
            return;
        };
        ctx.inc("relay.timeout");
        match pending.origin {
            Some(_) => {
                ctx.metrics.fail_e2e(e2e_key_id, "relay timed out");
            }
            None => {
                if let Some(upstream) = pending.upstream {
                    self.nak(ctx, upstream, e2e_key_id, u32::MAX, "downstream timeout");
                }
            }
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::LinkType;

    fn node(d: &str, n: &str) -> NodeId {
        NodeId::new(d, n).unwrap()
    }

    fn link(id: u8, a: &NodeId, b: &NodeId) -> LinkDescriptor {
        LinkDescriptor::new(
            LinkId::from_bytes([id; 16]),
            a.clone(),
            b.clone(),
            LinkType::Qkd,
            256,
            32,
        )
        .unwrap()
    }

    fn chain_controller() -> (Controller, Vec<NodeId>) {
        let nodes: Vec<NodeId> = ["a", "b", "c"].iter().map(|n| node("d", n)).collect();
        let mut c = Controller::new("d");
        for n in &nodes {
            c.add_node(n.clone(), false);
        }
        c.add_link(link(1, &nodes[0], &nodes[1])).unwrap();
        c.add_link(link(2, &nodes[1], &nodes[2])).unwrap();
        (c, nodes)
    }

    #[test]
    fn linear_chain_path() {
        let (c, nodes) = chain_controller();
        let path = c
            .compute_path(&nodes[0], &nodes[2], |_, _| true)
            .unwrap();
        assert_eq!(path.hops, nodes);
        assert_eq!(path.links.len(), 2);
    }

    #[test]
    fn equal_length_paths_pick_smaller_link_ids() {
        let a = node("d", "a");
        let b1 = node("d", "b1");
        let b2 = node("d", "b2");
        let c = node("d", "c");
        let mut ctl = Controller::new("d");
        for n in [&a, &b1, &b2, &c] {
            ctl.add_node(n.clone(), false);
        }
        // Two 2-hop routes; [1,4] vs [2,3]: [1,4] wins lexicographically.
        ctl.add_link(link(1, &a, &b1)).unwrap();
        ctl.add_link(link(4, &b1, &c)).unwrap();
        ctl.add_link(link(2, &a, &b2)).unwrap();
        ctl.add_link(link(3, &b2, &c)).unwrap();
        let path = ctl.compute_path(&a, &c, |_, _| true).unwrap();
        assert_eq!(path.hops[1], b1);
        // And among same-first-hop options the smaller second link wins.
        ctl.add_link(link(0, &b1, &c)).unwrap();
        let path = ctl.compute_path(&a, &c, |_, _| true).unwrap();
        assert_eq!(path.links[1], LinkId::from_bytes([0; 16]));
    }

    #[test]
    fn partitioned_topology_is_unreachable() {
        let (c, nodes) = chain_controller();
        let lonely = node("d", "z");
        let mut c2 = c.clone();
        c2.add_node(lonely.clone(), false);
        assert!(matches!(
            c2.compute_path(&nodes[0], &lonely, |_, _| true),
            Err(ForwardingError::Unreachable { .. })
        ));
    }

    #[test]
    fn starved_links_are_skipped() {
        let (c, nodes) = chain_controller();
        let err = c
            .compute_path(&nodes[0], &nodes[2], |l, _| {
                l.link_id != LinkId::from_bytes([2; 16])
            })
            .unwrap_err();
        assert!(matches!(err, ForwardingError::Unreachable { .. }));
    }

    #[test]
    fn foreign_node_rejected() {
        let (c, nodes) = chain_controller();
        let foreign = node("other", "x");
        assert!(matches!(
            c.compute_path(&nodes[0], &foreign, |_, _| true),
            Err(ForwardingError::NotInDomain { .. })
        ));
    }

    #[test]
    fn cross_domain_route_stitches_segments() {
        // d1: a - b(border); d2: c(border) - e. Bridge b<->c.
        let a = node("d1", "a");
        let b = node("d1", "b");
        let c = node("d2", "c");
        let e = node("d2", "e");
        let mut c1 = Controller::new("d1");
        c1.add_node(a.clone(), false);
        c1.add_node(b.clone(), true);
        c1.add_link(link(1, &a, &b)).unwrap();
        let mut c2 = Controller::new("d2");
        c2.add_node(c.clone(), true);
        c2.add_node(e.clone(), false);
        c2.add_link(link(2, &c, &e)).unwrap();
        let controllers = BTreeMap::from([("d1".into(), c1), ("d2".into(), c2)]);
        let bridges = vec![BorderBridge {
            name: "m1:d1-d2".into(),
            a: b.clone(),
            b: c.clone(),
            supplier: "hybrid:x+y".into(),
            channel: "border-ch".into(),
        }];
        let mut link_info = BTreeMap::new();
        link_info.insert(LinkId::from_bytes([1; 16]), LinkRouteInfo {
            supplier: "link:1".into(),
            channel: "ch1".into(),
        });
        link_info.insert(LinkId::from_bytes([2; 16]), LinkRouteInfo {
            supplier: "link:2".into(),
            channel: "ch2".into(),
        });
        let plan = plan_e2e_route(&controllers, &bridges, &link_info, &a, &e, |_, _| true)
            .unwrap();
        assert_eq!(plan.hops.len(), 3);
        assert_eq!(plan.hops[1].supplier, "hybrid:x+y");
        assert_eq!(plan.path.hops, vec![a, b, c, e]);
        assert_eq!(plan.path.border_crossings, BTreeSet::from([1]));
    }

    #[test]
    fn unbridged_domains_report_no_border_route() {
        let a = node("d1", "a");
        let b = node("d2", "b");
        let mut c1 = Controller::new("d1");
        c1.add_node(a.clone(), false);
        let mut c2 = Controller::new("d2");
        c2.add_node(b.clone(), false);
        let controllers = BTreeMap::from([("d1".into(), c1), ("d2".into(), c2)]);
        let err = plan_e2e_route(&controllers, &[], &BTreeMap::new(), &a, &b, |_, _| true)
            .unwrap_err();
        assert!(matches!(err, ForwardingError::NoBorderRoute { .. }));
    }
}
