//! Data-channel payload framing.
//!
//! Every data frame starts with a one-byte channel tag (ATT or SMP). ATT
//! PDUs are a reduced form: opcode, 8-byte little-endian op id, then
//! opcode-specific fields. After pairing, ATT payloads are encrypted by the
//! link layer while the tag byte stays in clear.

use thiserror::Error;

use crate::gatt::{GattOp, OpKind, Uuid};

pub const CHANNEL_ATT: u8 = 0x04;
pub const CHANNEL_SMP: u8 = 0x06;

const OP_ERROR: u8 = 0x01;
const OP_DISCOVER_REQ: u8 = 0x10;
const OP_DISCOVER_RSP: u8 = 0x11;
const OP_READ: u8 = 0x0a;
const OP_READ_RSP: u8 = 0x0b;
const OP_WRITE: u8 = 0x12;
const OP_NOTIFY: u8 = 0x1b;
const OP_SUBSCRIBE: u8 = 0x1e;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed ATT PDU")]
pub struct MalformedPdu;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttPdu {
    Op(GattOp),
    Error { op_id: u64, code: u8 },
    DiscoverReq { op_id: u64 },
    DiscoverRsp { op_id: u64, layout: Vec<u8> },
}

fn opcode(kind: OpKind) -> u8 {
    match kind {
        OpKind::Read => OP_READ,
        OpKind::ReadResponse => OP_READ_RSP,
        OpKind::Write => OP_WRITE,
        OpKind::Notify => OP_NOTIFY,
        OpKind::Subscribe => OP_SUBSCRIBE,
    }
}

fn kind_of(opcode: u8) -> Option<OpKind> {
    Some(match opcode {
        OP_READ => OpKind::Read,
        OP_READ_RSP => OpKind::ReadResponse,
        OP_WRITE => OpKind::Write,
        OP_NOTIFY => OpKind::Notify,
        OP_SUBSCRIBE => OpKind::Subscribe,
        _ => return None,
    })
}

impl AttPdu {
    pub fn op_id(&self) -> u64 {
        match self {
            AttPdu::Op(op) => op.op_id,
            AttPdu::Error { op_id, .. }
            | AttPdu::DiscoverReq { op_id }
            | AttPdu::DiscoverRsp { op_id, .. } => *op_id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            AttPdu::Op(op) => {
                out.push(opcode(op.kind));
                out.extend_from_slice(&op.op_id.to_le_bytes());
                let uuid = op.target.to_le_bytes();
                out.push(uuid.len() as u8);
                out.extend_from_slice(&uuid);
                out.extend_from_slice(&op.payload);
            }
            AttPdu::Error { op_id, code } => {
                out.push(OP_ERROR);
                out.extend_from_slice(&op_id.to_le_bytes());
                out.push(*code);
            }
            AttPdu::DiscoverReq { op_id } => {
                out.push(OP_DISCOVER_REQ);
                out.extend_from_slice(&op_id.to_le_bytes());
            }
            AttPdu::DiscoverRsp { op_id, layout } => {
                out.push(OP_DISCOVER_RSP);
                out.extend_from_slice(&op_id.to_le_bytes());
                out.extend_from_slice(layout);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<AttPdu, MalformedPdu> {
        if bytes.len() < 9 {
            return Err(MalformedPdu);
        }
        let op = bytes[0];
        let op_id = u64::from_le_bytes(bytes[1..9].try_into().expect("8 bytes"));
        let body = &bytes[9..];
        match op {
            OP_ERROR => match body {
                [code] => Ok(AttPdu::Error { op_id, code: *code }),
                _ => Err(MalformedPdu),
            },
            OP_DISCOVER_REQ if body.is_empty() => Ok(AttPdu::DiscoverReq { op_id }),
            OP_DISCOVER_RSP => Ok(AttPdu::DiscoverRsp {
                op_id,
                layout: body.to_vec(),
            }),
            _ => {
                let kind = kind_of(op).ok_or(MalformedPdu)?;
                let (&len, rest) = body.split_first().ok_or(MalformedPdu)?;
                let len = len as usize;
                if rest.len() < len {
                    return Err(MalformedPdu);
                }
                let target = Uuid::from_le_bytes(&rest[..len]).ok_or(MalformedPdu)?;
                Ok(AttPdu::Op(GattOp::new(kind, target, rest[len..].to_vec(), op_id)))
            }
        }
    }
}

/// Splits the channel tag from a data-frame payload.
pub fn split_channel(payload: &[u8]) -> Option<(u8, &[u8])> {
    payload.split_first().map(|(t, rest)| (*t, rest))
}

pub fn with_channel(tag: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 1);
    out.push(tag);
    out.extend_from_slice(body);
    out
}

/// Echo request/response payloads: `[identifier]` and `[identifier, status]`.
pub const ECHO_OK: u8 = 0x00;
pub const ECHO_REJECTED: u8 = 0x01;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gatt::HEART_RATE_MEASUREMENT;

    #[test]
    fn round_trips() {
        let pdus = [
            AttPdu::Op(GattOp::new(OpKind::Notify, HEART_RATE_MEASUREMENT, vec![0, 0x46], 7)),
            AttPdu::Op(GattOp::new(OpKind::Read, Uuid::Full(1 << 100), vec![], 1)),
            AttPdu::Op(GattOp::new(OpKind::Subscribe, HEART_RATE_MEASUREMENT, vec![], u64::MAX)),
            AttPdu::Error { op_id: 3, code: 0x03 },
            AttPdu::DiscoverReq { op_id: 0 },
            AttPdu::DiscoverRsp {
                op_id: 2,
                layout: vec![0, 1, 0, 2, 0x0d, 0x18],
            },
        ];
        for p in pdus {
            assert_eq!(AttPdu::decode(&p.encode()), Ok(p));
        }
    }

    #[test]
    fn notify_layout() {
        let p = AttPdu::Op(GattOp::new(OpKind::Notify, HEART_RATE_MEASUREMENT, vec![0, 0xff], 1));
        assert_eq!(
            p.encode(),
            [0x1b, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0x37, 0x2a, 0x00, 0xff]
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(AttPdu::decode(&[]).is_err());
        assert!(AttPdu::decode(&[0x55; 12]).is_err());
        assert!(AttPdu::decode(&[0x1b, 0, 0, 0, 0, 0, 0, 0, 0, 16, 1]).is_err());
    }
}
