//! Passive capture analysis. Reads the frame log as an over-the-air sniffer
//! would, recovers legacy pairing keys and decrypts the ATT traffic that
//! follows.

use std::collections::BTreeMap;

use crate::att::{split_channel, AttPdu, CHANNEL_ATT, CHANNEL_SMP};
use crate::pairing::{
    decrypt_link, eavesdrop_recover, Key128, LinkDirection, PairingTranscript, Recovery, SmpPdu,
    TranscriptCapture,
};
use crate::radio::{Address, FrameKind, FrameRecord, TimeMs};

/// One pairing seen on air and what the sniffer made of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SniffedPairing {
    pub time_ms: TimeMs,
    pub initiator: Address,
    pub responder: Address,
    pub transcript: PairingTranscript,
    pub recovery: Recovery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SniffedAtt {
    pub time_ms: TimeMs,
    pub sender: Address,
    pub receiver: Address,
    pub pdu: AttPdu,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Capture {
    pub pairings: Vec<SniffedPairing>,
    pub att: Vec<SniffedAtt>,
    /// Encrypted frames the sniffer could not open.
    pub opaque_frames: usize,
}

#[derive(Default)]
struct PairState {
    initiator: Option<Address>,
    capture: TranscriptCapture,
    key: Option<Key128>,
    /// Whether a completed pairing switched the link to ciphertext.
    encrypted: bool,
    next_counter: [u64; 2],
}

fn pair_key(a: Address, b: Address) -> (Address, Address) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Replays `records` (already in send order) through the sniffer.
pub fn analyze(records: &[FrameRecord]) -> Capture {
    let mut pairs: BTreeMap<(Address, Address), PairState> = BTreeMap::new();
    let mut out = Capture::default();
    for rec in records {
        if rec.kind != FrameKind::Data {
            continue;
        }
        let Some(receiver) = rec.receiver else {
            continue;
        };
        let Ok(payload) = hex::decode(&rec.payload_hex) else {
            continue;
        };
        let Some((tag, body)) = split_channel(&payload) else {
            continue;
        };
        let state = pairs.entry(pair_key(rec.sender, receiver)).or_default();
        match tag {
            CHANNEL_SMP => {
                let Ok(pdu) = SmpPdu::decode(body) else {
                    continue;
                };
                if matches!(pdu, SmpPdu::PairingRequest { .. }) {
                    *state = PairState {
                        initiator: Some(rec.sender),
                        ..PairState::default()
                    };
                }
                let Some(initiator) = state.initiator else {
                    continue;
                };
                let from_initiator = rec.sender == initiator;
                state.capture.observe(from_initiator, &pdu);
                if matches!(pdu, SmpPdu::Random(_)) && !from_initiator {
                    state.encrypted = true;
                    if let Some(transcript) = state.capture.transcript() {
                        let recovery = eavesdrop_recover(&transcript);
                        state.key = recovery.stk();
                        out.pairings.push(SniffedPairing {
                            time_ms: rec.time_ms,
                            initiator,
                            responder: rec.sender,
                            transcript,
                            recovery,
                        });
                    }
                }
            }
            CHANNEL_ATT => {
                let plain = if !state.encrypted {
                    Some(body.to_vec())
                } else {
                    let direction = if Some(rec.sender) == state.initiator {
                        LinkDirection::CentralToPeripheral
                    } else {
                        LinkDirection::PeripheralToCentral
                    };
                    let slot = match direction {
                        LinkDirection::CentralToPeripheral => 0,
                        LinkDirection::PeripheralToCentral => 1,
                    };
                    let counter = state.next_counter[slot];
                    state.next_counter[slot] += 1;
                    state
                        .key
                        .and_then(|k| decrypt_link(k, counter, direction, body).ok())
                };
                match plain.as_deref().map(AttPdu::decode) {
                    Some(Ok(pdu)) => out.att.push(SniffedAtt {
                        time_ms: rec.time_ms,
                        sender: rec.sender,
                        receiver,
                        pdu,
                    }),
                    _ => out.opaque_frames += 1,
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use crate::gatt::{OpKind, HEART_RATE_MEASUREMENT};
    use crate::pairing::IoCapability;
    use crate::sim::{World, PHONE_ADDRESS, SENSOR_ADDRESS};

    fn capture(cfg: ScenarioConfig) -> (World, Capture) {
        let mut w = World::new(cfg).unwrap();
        w.run();
        let c = analyze(&w.medium.records());
        (w, c)
    }

    #[test]
    fn just_works_link_is_transparent() {
        let (w, c) = capture(ScenarioConfig {
            duration_ms: 8000,
            ..ScenarioConfig::default()
        });
        assert_eq!(c.pairings.len(), 1);
        let p = &c.pairings[0];
        assert_eq!((p.initiator, p.responder), (PHONE_ADDRESS, SENSOR_ADDRESS));
        assert_eq!(p.recovery.stk(), w.pairings()[0].key);
        assert_eq!(c.opaque_frames, 0);
        let notifies: Vec<&SniffedAtt> = c
            .att
            .iter()
            .filter(|a| matches!(&a.pdu, AttPdu::Op(op) if op.kind == OpKind::Notify))
            .collect();
        assert!(!notifies.is_empty());
        for n in notifies {
            let AttPdu::Op(op) = &n.pdu else { unreachable!() };
            assert_eq!(op.target, HEART_RATE_MEASUREMENT);
            assert_eq!(op.payload[1], 70);
        }
    }

    #[test]
    fn passkey_link_falls_to_search() {
        let (w, c) = capture(ScenarioConfig {
            duration_ms: 4000,
            responder_io: IoCapability::DisplayOnly,
            passkey: Some(123_456),
            ..ScenarioConfig::default()
        });
        let Recovery::Recovered { tk, .. } = c.pairings[0].recovery else {
            panic!("{:?}", c.pairings[0].recovery);
        };
        assert_eq!(tk, Key128(123_456));
        assert_eq!(c.pairings[0].recovery.stk(), w.pairings()[0].key);
        assert_eq!(c.opaque_frames, 0);
    }

    #[test]
    fn oob_link_stays_opaque() {
        let (_, c) = capture(ScenarioConfig {
            duration_ms: 4000,
            oob_available: true,
            ..ScenarioConfig::default()
        });
        assert!(c.pairings[0].recovery.stk().is_none());
        assert!(c.opaque_frames > 0);
        assert!(c.att.is_empty());
    }
}
