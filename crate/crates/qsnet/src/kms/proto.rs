//! Request/response protocol for the key-delivery service: the verbs
//! OPEN_CONNECT, GET_KEY, CLOSE, GET_KEY_014, GET_KEY_WITH_IDS and
//! PUSH_KEY with canonical-serialized bodies. Runs over a local
//! reliable channel or in-process loopback; the CLI renders the same
//! data as JSON for inspection.

use crate::core::wire::{Canonical, Reader, Writer, WireError};
use crate::core::{KeyEntry, KeyId, KeyMaterial, NodeId};

use super::{KeyQos, KeyStore, KmsError, PushOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KmsRequest {
    OpenConnect {
        source: NodeId,
        destination: NodeId,
        qos: KeyQos,
        ksid: Option<KeyId>,
    },
    GetKey {
        ksid: KeyId,
    },
    Close {
        ksid: KeyId,
    },
    GetKey014 {
        requester: NodeId,
        peer: NodeId,
        number: u32,
        size: u32,
    },
    GetKeyWithIds {
        requester: NodeId,
        peer: NodeId,
        ids: Vec<KeyId>,
    },
    PushKey {
        supplier_id: String,
        entry: KeyEntry,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum KmsErrorCode {
    UnknownSupplier = 0,
    IntegrityConflict = 1,
    NoKeyAvailable = 2,
    UnknownKsid = 3,
    UnknownKeyId = 4,
    AlreadyConsumed = 5,
    Expired = 6,
    QosUnsatisfiable = 7,
    InvalidRequest = 8,
    Internal = 9,
}

impl KmsErrorCode {
    fn from_wire(code: u8) -> Result<Self, WireError> {
        use KmsErrorCode::*;
        Ok(match code {
            0 => UnknownSupplier,
            1 => IntegrityConflict,
            2 => NoKeyAvailable,
            3 => UnknownKsid,
            4 => UnknownKeyId,
            5 => AlreadyConsumed,
            6 => Expired,
            7 => QosUnsatisfiable,
            8 => InvalidRequest,
            9 => Internal,
            other => {
                return Err(WireError::invalid("error_code", format!("unknown {other}")));
            }
        })
    }
}

impl From<&KmsError> for KmsErrorCode {
    fn from(e: &KmsError) -> Self {
        match e {
            KmsError::UnknownSupplier { .. } => KmsErrorCode::UnknownSupplier,
            KmsError::IntegrityConflict { .. } => KmsErrorCode::IntegrityConflict,
            KmsError::NoKeyAvailable { .. } | KmsError::SupplierStarved(_) => {
                KmsErrorCode::NoKeyAvailable
            }
            KmsError::UnknownKsid(_) => KmsErrorCode::UnknownKsid,
            KmsError::UnknownKeyId { .. } => KmsErrorCode::UnknownKeyId,
            KmsError::AlreadyConsumed(_) => KmsErrorCode::AlreadyConsumed,
            KmsError::Expired(_) => KmsErrorCode::Expired,
            KmsError::QosUnsatisfiable(_) | KmsError::NotAnEndpoint { .. } => {
                KmsErrorCode::QosUnsatisfiable
            }
            KmsError::Validation(_) | KmsError::NeedTwoSuppliers => KmsErrorCode::InvalidRequest,
            KmsError::Crypto(_) => KmsErrorCode::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KmsResponse {
    Opened {
        ksid: KeyId,
    },
    Key {
        key_id: KeyId,
        key: KeyMaterial,
    },
    Closed,
    Keys {
        keys: Vec<(KeyId, KeyMaterial)>,
    },
    Pushed {
        duplicate: bool,
    },
    Error {
        code: KmsErrorCode,
        message: String,
        retry_after_ms: u64,
    },
}

impl Canonical for KmsRequest {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            KmsRequest::OpenConnect {
                source,
                destination,
                qos,
                ksid,
            } => {
                w.put_u8(0);
                source.encode_into(w);
                destination.encode_into(w);
                w.put_u64(qos.rate_bps);
                w.put_u32(qos.key_len);
                match ksid {
                    Some(id) => {
                        w.put_u8(1);
                        id.encode_into(w);
                    }
                    None => w.put_u8(0),
                }
            }
            KmsRequest::GetKey { ksid } => {
                w.put_u8(1);
                ksid.encode_into(w);
            }
            KmsRequest::Close { ksid } => {
                w.put_u8(2);
                ksid.encode_into(w);
            }
            KmsRequest::GetKey014 {
                requester,
                peer,
                number,
                size,
            } => {
                w.put_u8(3);
                requester.encode_into(w);
                peer.encode_into(w);
                w.put_u32(*number);
                w.put_u32(*size);
            }
            KmsRequest::GetKeyWithIds {
                requester,
                peer,
                ids,
            } => {
                w.put_u8(4);
                requester.encode_into(w);
                peer.encode_into(w);
                w.put_u32(ids.len() as u32);
                for id in ids {
                    id.encode_into(w);
                }
            }
            KmsRequest::PushKey { supplier_id, entry } => {
                w.put_u8(5);
                w.put_str(supplier_id);
                entry.encode_into(w);
            }
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => {
                let source = NodeId::decode_from(r)?;
                let destination = NodeId::decode_from(r)?;
                let rate_bps = r.u64()?;
                let key_len = r.u32()?;
                let ksid = match r.u8()? {
                    0 => None,
                    1 => Some(KeyId::decode_from(r)?),
                    other => {
                        return Err(WireError::invalid("ksid_flag", format!("unknown {other}")));
                    }
                };
                KmsRequest::OpenConnect {
                    source,
                    destination,
                    qos: KeyQos { rate_bps, key_len },
                    ksid,
                }
            }
            1 => KmsRequest::GetKey {
                ksid: KeyId::decode_from(r)?,
            },
            2 => KmsRequest::Close {
                ksid: KeyId::decode_from(r)?,
            },
            3 => KmsRequest::GetKey014 {
                requester: NodeId::decode_from(r)?,
                peer: NodeId::decode_from(r)?,
                number: r.u32()?,
                size: r.u32()?,
            },
            4 => {
                let requester = NodeId::decode_from(r)?;
                let peer = NodeId::decode_from(r)?;
                let n = r.count("ids", 16)?;
                let mut ids = Vec::new();
                for _ in 0..n {
                    ids.push(KeyId::decode_from(r)?);
                }
                KmsRequest::GetKeyWithIds {
                    requester,
                    peer,
                    ids,
                }
            }
            5 => KmsRequest::PushKey {
                supplier_id: r.string("supplier_id")?,
                entry: KeyEntry::decode_from(r)?,
            },
            other => {
                return Err(WireError::invalid("verb", format!("unknown {other}")));
            }
        })
    }
}

impl Canonical for KmsResponse {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            KmsResponse::Opened { ksid } => {
                w.put_u8(0);
                ksid.encode_into(w);
            }
            KmsResponse::Key { key_id, key } => {
                w.put_u8(1);
                key_id.encode_into(w);
                key.encode_into(w);
            }
            KmsResponse::Closed => w.put_u8(2),
            KmsResponse::Keys { keys } => {
                w.put_u8(3);
                w.put_u32(keys.len() as u32);
                for (id, key) in keys {
                    id.encode_into(w);
                    key.encode_into(w);
                }
            }
            KmsResponse::Pushed { duplicate } => {
                w.put_u8(4);
                w.put_u8(u8::from(*duplicate));
            }
            KmsResponse::Error {
                code,
                message,
                retry_after_ms,
            } => {
                w.put_u8(5);
                w.put_u8(*code as u8);
                w.put_str(message);
                w.put_u64(*retry_after_ms);
            }
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => KmsResponse::Opened {
                ksid: KeyId::decode_from(r)?,
            },
            1 => KmsResponse::Key {
                key_id: KeyId::decode_from(r)?,
                key: KeyMaterial::decode_from(r)?,
            },
            2 => KmsResponse::Closed,
            3 => {
                let n = r.count("keys", 36)?;
                let mut keys = Vec::new();
                for _ in 0..n {
                    keys.push((KeyId::decode_from(r)?, KeyMaterial::decode_from(r)?));
                }
                KmsResponse::Keys { keys }
            }
            4 => KmsResponse::Pushed {
                duplicate: r.u8()? != 0,
            },
            5 => KmsResponse::Error {
                code: KmsErrorCode::from_wire(r.u8()?)?,
                message: r.string("message")?,
                retry_after_ms: r.u64()?,
            },
            other => {
                return Err(WireError::invalid("response", format!("unknown {other}")));
            }
        })
    }
}

fn error_response(e: &KmsError) -> KmsResponse {
    let retry_after_ms = match e {
        KmsError::NoKeyAvailable { retry_after } => retry_after.as_millis() as u64,
        _ => 0,
    };
    KmsResponse::Error {
        code: e.into(),
        message: e.to_string(),
        retry_after_ms,
    }
}

/// Execute one verb against a store.
pub fn handle_request(store: &mut KeyStore, req: KmsRequest, now_s: u64) -> KmsResponse {
    let result = match req {
        KmsRequest::OpenConnect {
            source,
            destination,
            qos,
            ksid,
        } => store
            .open_connect(source, destination, qos, ksid, now_s)
            .map(|ksid| KmsResponse::Opened { ksid }),
        KmsRequest::GetKey { ksid } => store
            .get_key(ksid, now_s)
            .map(|(key, key_id)| KmsResponse::Key { key_id, key }),
        KmsRequest::Close { ksid } => store.close(ksid).map(|()| KmsResponse::Closed),
        KmsRequest::GetKey014 {
            requester,
            peer,
            number,
            size,
        } => store
            .get_key_014(&requester, &peer, number, size, now_s)
            .map(|keys| KmsResponse::Keys { keys }),
        KmsRequest::GetKeyWithIds {
            requester,
            peer,
            ids,
        } => store
            .get_key_with_ids(&requester, &peer, &ids, now_s)
            .map(|keys| KmsResponse::Keys { keys }),
        KmsRequest::PushKey { supplier_id, entry } => {
            store.push_key(&supplier_id, entry).map(|outcome| {
                KmsResponse::Pushed {
                    duplicate: outcome == PushOutcome::Duplicate,
                }
            })
        }
    };
    result.unwrap_or_else(|e| error_response(&e))
}

/// Loopback endpoint: decode, dispatch, encode. Malformed requests get
/// an InvalidRequest error response rather than silence.
pub fn handle_request_bytes(store: &mut KeyStore, bytes: &[u8], now_s: u64) -> Vec<u8> {
    let response = match KmsRequest::decode(bytes) {
        Ok(req) => handle_request(store, req, now_s),
        Err(e) => KmsResponse::Error {
            code: KmsErrorCode::InvalidRequest,
            message: e.to_string(),
            retry_after_ms: 0,
        },
    };
    response.canonical_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::ValidityWindow;
    use crate::seclevel::{SecurityExpr, SecurityLabel};

    fn node(d: &str, n: &str) -> NodeId {
        NodeId::new(d, n).unwrap()
    }

    fn sample_entry() -> KeyEntry {
        KeyEntry::new(
            KeyId::from_bytes([3; 16]),
            KeyMaterial::new(vec![9; 32]).unwrap(),
            node("d", "peer"),
            "link:x",
            ValidityWindow::new(0, 100).unwrap(),
            SecurityExpr::atom(SecurityLabel::its(["sc"])),
        )
        .unwrap()
    }

    #[test]
    fn request_roundtrips() {
        let reqs = vec![
            KmsRequest::OpenConnect {
                source: node("d", "a"),
                destination: node("d", "b"),
                qos: KeyQos {
                    rate_bps: 256,
                    key_len: 32,
                },
                ksid: Some(KeyId::from_bytes([1; 16])),
            },
            KmsRequest::GetKey {
                ksid: KeyId::from_bytes([2; 16]),
            },
            KmsRequest::Close {
                ksid: KeyId::from_bytes([2; 16]),
            },
            KmsRequest::GetKey014 {
                requester: node("d", "a"),
                peer: node("d", "b"),
                number: 3,
                size: 32,
            },
            KmsRequest::GetKeyWithIds {
                requester: node("d", "a"),
                peer: node("d", "b"),
                ids: vec![KeyId::from_bytes([4; 16]), KeyId::from_bytes([5; 16])],
            },
            KmsRequest::PushKey {
                supplier_id: "link:x".into(),
                entry: sample_entry(),
            },
        ];
        for req in reqs {
            let bytes = req.canonical_bytes();
            assert_eq!(KmsRequest::decode(&bytes).unwrap(), req);
        }
    }

    #[test]
    fn full_loopback_push_then_fetch() {
        let me = node("d", "me");
        let peer = node("d", "peer");
        let mut store = KeyStore::new(me.clone());
        store.register_supplier(peer.clone(), "link:x", 32, 256);

        let entry = KeyEntry::new(
            KeyId::from_bytes([8; 16]),
            KeyMaterial::new(vec![7; 32]).unwrap(),
            peer.clone(),
            "link:x",
            ValidityWindow::new(0, 100).unwrap(),
            SecurityExpr::atom(SecurityLabel::its(["sc"])),
        )
        .unwrap();
        let push = KmsRequest::PushKey {
            supplier_id: "link:x".into(),
            entry: entry.clone(),
        };
        let resp = handle_request_bytes(&mut store, &push.canonical_bytes(), 1);
        assert_eq!(
            KmsResponse::decode(&resp).unwrap(),
            KmsResponse::Pushed { duplicate: false }
        );

        let fetch = KmsRequest::GetKeyWithIds {
            requester: me,
            peer,
            ids: vec![entry.key_id],
        };
        let resp = handle_request_bytes(&mut store, &fetch.canonical_bytes(), 1);
        match KmsResponse::decode(&resp).unwrap() {
            KmsResponse::Keys { keys } => assert_eq!(keys[0].1, entry.key),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_map_to_codes_with_retry_hint() {
        let me = node("d", "me");
        let peer = node("d", "peer");
        let mut store = KeyStore::new(me.clone());
        store.register_supplier(peer.clone(), "link:x", 32, 256);
        let ksid = store
            .open_connect(
                me,
                peer,
                KeyQos {
                    rate_bps: 256,
                    key_len: 32,
                },
                None,
                0,
            )
            .unwrap();
        let resp = handle_request(&mut store, KmsRequest::GetKey { ksid }, 0);
        match resp {
            KmsResponse::Error {
                code,
                retry_after_ms,
                ..
            } => {
                assert_eq!(code, KmsErrorCode::NoKeyAvailable);
                assert_eq!(retry_after_ms, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_request_reports_invalid() {
        let mut store = KeyStore::new(node("d", "me"));
        let resp = handle_request_bytes(&mut store, &[200, 1, 2], 0);
        match KmsResponse::decode(&resp).unwrap() {
            KmsResponse::Error { code, .. } => assert_eq!(code, KmsErrorCode::InvalidRequest),
            other => panic!("unexpected {other:?}"),
        }
    }
}
