//! The message envelope carried over simulated channels. Everything a
//! node can receive decodes from this one entry point.

use crate::border::{KeyPackage, PathId};
use crate::core::wire::{Canonical, Reader, Writer, WireError};
use crate::core::{KeyId, NodeId, ValidityWindow};
use crate::seclevel::SecurityExpr;

/// Identifies one key-exchange stream between two endpoints: a link's
/// emulation session or an application-level border-node session.
/// Several streams may share a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StreamId {
    pub id: [u8; 16],
    pub instance: u8,
}

impl Canonical for StreamId {
    fn encode_into(&self, w: &mut Writer) {
        w.put_raw(&self.id);
        w.put_u8(self.instance);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let id: [u8; 16] = r.take(16)?.try_into().unwrap();
        let instance = r.u8()?;
        Ok(Self { id, instance })
    }
}

/// Per-key exchange protocol: package, acknowledgment, and the resync
/// handshake that repairs the stores after an outage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeBody {
    Package { seq: u64, package: KeyPackage },
    Ack { seq: u64, rnd_id: KeyId },
    SyncReq { acked_seq: u64 },
    SyncResp { revoked: u32 },
}

/// Two-path block protocol of the multipath border method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum M4Body {
    Block {
        seq: u64,
        path: PathId,
        packages: Vec<KeyPackage>,
    },
    BlockAck {
        seq: u64,
        path: PathId,
        verified: Vec<KeyId>,
    },
    /// `recoverable`: ids the sender can still commit if the receiver
    /// holds them. `dead`: ids the sender gave up on; the receiver must
    /// drop its copies.
    SyncReq {
        recoverable: Vec<KeyId>,
        dead: Vec<KeyId>,
    },
    SyncResp {
        stored: Vec<KeyId>,
        revoked: u32,
    },
}

/// One hop of a relay route.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayHop {
    pub from: NodeId,
    pub to: NodeId,
    pub supplier: String,
    pub channel: String,
}

impl Canonical for RelayHop {
    fn encode_into(&self, w: &mut Writer) {
        self.from.encode_into(w);
        self.to.encode_into(w);
        w.put_str(&self.supplier);
        w.put_str(&self.channel);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Self {
            from: NodeId::decode_from(r)?,
            to: NodeId::decode_from(r)?,
            supplier: r.string("supplier")?,
            channel: r.string("channel")?,
        })
    }
}

/// A hop-by-hop relay transfer: the payload one-time-padded with the
/// named link key, plus everything the next trusted node needs to
/// unwrap, re-wrap and forward. Metadata travels in the clear; only the
/// key bytes are pad-encrypted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayMsg {
    pub e2e_key_id: KeyId,
    pub origin: NodeId,
    pub destination: NodeId,
    pub validity: ValidityWindow,
    pub hop_index: u32,
    pub route: Vec<RelayHop>,
    pub wrapped: Vec<u8>,
    pub pad_supplier: String,
    pub pad_key_id: KeyId,
    /// Serial composition of the pad labels consumed so far.
    pub label_so_far: SecurityExpr,
}

impl Canonical for RelayMsg {
    fn encode_into(&self, w: &mut Writer) {
        self.e2e_key_id.encode_into(w);
        self.origin.encode_into(w);
        self.destination.encode_into(w);
        self.validity.encode_into(w);
        w.put_u32(self.hop_index);
        w.put_u32(self.route.len() as u32);
        for hop in &self.route {
            hop.encode_into(w);
        }
        w.put_octets(&self.wrapped);
        w.put_str(&self.pad_supplier);
        self.pad_key_id.encode_into(w);
        self.label_so_far.encode_into(w);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let e2e_key_id = KeyId::decode_from(r)?;
        let origin = NodeId::decode_from(r)?;
        let destination = NodeId::decode_from(r)?;
        let validity = ValidityWindow::decode_from(r)?;
        let hop_index = r.u32()?;
        let n = r.count("route", 20)?;
        let mut route = Vec::new();
        for _ in 0..n {
            route.push(RelayHop::decode_from(r)?);
        }
        let wrapped = r.octets("wrapped")?.to_vec();
        let pad_supplier = r.string("pad_supplier")?;
        let pad_key_id = KeyId::decode_from(r)?;
        let label_so_far = SecurityExpr::decode_from(r)?;
        Ok(Self {
            e2e_key_id,
            origin,
            destination,
            validity,
            hop_index,
            route,
            wrapped,
            pad_supplier,
            pad_key_id,
            label_so_far,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetMessage {
    Exchange { stream: StreamId, body: ExchangeBody },
    M4 { pair: String, body: M4Body },
    Relay(RelayMsg),
    RelayAck { e2e_key_id: KeyId, label: SecurityExpr },
    RelayNak {
        e2e_key_id: KeyId,
        failed_hop: u32,
        reason: String,
    },
}

fn put_key_ids(w: &mut Writer, ids: &[KeyId]) {
    w.put_u32(ids.len() as u32);
    for id in ids {
        id.encode_into(w);
    }
}

fn get_key_ids(r: &mut Reader, field: &'static str) -> Result<Vec<KeyId>, WireError> {
    let n = r.count(field, 16)?;
    let mut ids = Vec::new();
    for _ in 0..n {
        ids.push(KeyId::decode_from(r)?);
    }
    Ok(ids)
}

impl Canonical for NetMessage {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            NetMessage::Exchange { stream, body } => {
                w.put_u8(0);
                stream.encode_into(w);
                match body {
                    ExchangeBody::Package { seq, package } => {
                        w.put_u8(0);
                        w.put_u64(*seq);
                        package.encode_into(w);
                    }
                    ExchangeBody::Ack { seq, rnd_id } => {
                        w.put_u8(1);
                        w.put_u64(*seq);
                        rnd_id.encode_into(w);
                    }
                    ExchangeBody::SyncReq { acked_seq } => {
                        w.put_u8(2);
                        w.put_u64(*acked_seq);
                    }
                    ExchangeBody::SyncResp { revoked } => {
                        w.put_u8(3);
                        w.put_u32(*revoked);
                    }
                }
            }
            NetMessage::M4 { pair, body } => {
                w.put_u8(1);
                w.put_str(pair);
                match body {
                    M4Body::Block {
                        seq,
                        path,
                        packages,
                    } => {
                        w.put_u8(0);
                        w.put_u64(*seq);
                        w.put_u8(path.wire_code());
                        w.put_u32(packages.len() as u32);
                        for p in packages {
                            p.encode_into(w);
                        }
                    }
                    M4Body::BlockAck {
                        seq,
                        path,
                        verified,
                    } => {
                        w.put_u8(1);
                        w.put_u64(*seq);
                        w.put_u8(path.wire_code());
                        put_key_ids(w, verified);
                    }
                    M4Body::SyncReq { recoverable, dead } => {
                        w.put_u8(2);
                        put_key_ids(w, recoverable);
                        put_key_ids(w, dead);
                    }
                    M4Body::SyncResp { stored, revoked } => {
                        w.put_u8(3);
                        put_key_ids(w, stored);
                        w.put_u32(*revoked);
                    }
                }
            }
            NetMessage::Relay(msg) => {
                w.put_u8(2);
                msg.encode_into(w);
            }
            NetMessage::RelayAck { e2e_key_id, label } => {
                w.put_u8(3);
                e2e_key_id.encode_into(w);
                label.encode_into(w);
            }
            NetMessage::RelayNak {
                e2e_key_id,
                failed_hop,
                reason,
            } => {
                w.put_u8(4);
                e2e_key_id.encode_into(w);
                w.put_u32(*failed_hop);
                w.put_str(reason);
            }
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => {
                let stream = StreamId::decode_from(r)?;
                let body = match r.u8()? {
                    0 => ExchangeBody::Package {
                        seq: r.u64()?,
                        package: KeyPackage::decode_from(r)?,
                    },
                    1 => ExchangeBody::Ack {
                        seq: r.u64()?,
                        rnd_id: KeyId::decode_from(r)?,
                    },
                    2 => ExchangeBody::SyncReq { acked_seq: r.u64()? },
                    3 => ExchangeBody::SyncResp { revoked: r.u32()? },
                    other => {
                        return Err(WireError::invalid(
                            "exchange_body",
                            format!("unknown tag {other}"),
                        ));
                    }
                };
                NetMessage::Exchange { stream, body }
            }
            1 => {
                let pair = r.string("pair")?;
                let body = match r.u8()? {
                    0 => {
                        let seq = r.u64()?;
                        let path = PathId::from_wire(r.u8()?)?;
                        let n = r.count("packages", 30)?;
                        let mut packages = Vec::new();
                        for _ in 0..n {
                            packages.push(KeyPackage::decode_from(r)?);
                        }
                        M4Body::Block {
                            seq,
                            path,
                            packages,
                        }
                    }
                    1 => M4Body::BlockAck {
                        seq: r.u64()?,
                        path: PathId::from_wire(r.u8()?)?,
                        verified: get_key_ids(r, "verified")?,
                    },
                    2 => M4Body::SyncReq {
                        recoverable: get_key_ids(r, "recoverable")?,
                        dead: get_key_ids(r, "dead")?,
                    },
                    3 => M4Body::SyncResp {
                        stored: get_key_ids(r, "stored")?,
                        revoked: r.u32()?,
                    },
                    other => {
                        return Err(WireError::invalid(
                            "m4_body",
                            format!("unknown tag {other}"),
                        ));
                    }
                };
                NetMessage::M4 { pair, body }
            }
            2 => NetMessage::Relay(RelayMsg::decode_from(r)?),
            3 => NetMessage::RelayAck {
                e2e_key_id: KeyId::decode_from(r)?,
                label: SecurityExpr::decode_from(r)?,
            },
            4 => NetMessage::RelayNak {
                e2e_key_id: KeyId::decode_from(r)?,
                failed_hop: r.u32()?,
                reason: r.string("reason")?,
            },
            other => {
                return Err(WireError::invalid(
                    "message",
                    format!("unknown tag {other}"),
                ));
            }
        })
    }
}
