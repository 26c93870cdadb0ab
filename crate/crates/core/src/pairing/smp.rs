//! Security manager PDUs and the sniffer-side transcript builder.

use super::{
    select_association, IoCapability, Key128, PairingError, PairingMode, PairingTranscript,
    PublicValues,
};

const OP_PAIRING_REQUEST: u8 = 0x01;
const OP_PAIRING_RESPONSE: u8 = 0x02;
const OP_CONFIRM: u8 = 0x03;
const OP_RANDOM: u8 = 0x04;
const OP_PUBLIC_KEY: u8 = 0x0c;

const AUTH_REQ_SC: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmpPdu {
    PairingRequest {
        io: IoCapability,
        oob: bool,
        secure_connections: bool,
    },
    PairingResponse {
        io: IoCapability,
        oob: bool,
        secure_connections: bool,
    },
    Confirm(Key128),
    Random(Key128),
    PublicKey([u8; 64]),
}

impl SmpPdu {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            SmpPdu::PairingRequest {
                io,
                oob,
                secure_connections,
            }
            | SmpPdu::PairingResponse {
                io,
                oob,
                secure_connections,
            } => {
                let op = if matches!(self, SmpPdu::PairingRequest { .. }) {
                    OP_PAIRING_REQUEST
                } else {
                    OP_PAIRING_RESPONSE
                };
                let auth = if *secure_connections { AUTH_REQ_SC } else { 0 };
                vec![op, io.code(), u8::from(*oob), auth]
            }
            SmpPdu::Confirm(k) => [&[OP_CONFIRM][..], &k.to_bytes()].concat(),
            SmpPdu::Random(k) => [&[OP_RANDOM][..], &k.to_bytes()].concat(),
            SmpPdu::PublicKey(pk) => [&[OP_PUBLIC_KEY][..], &pk[..]].concat(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<SmpPdu, PairingError> {
        let (&op, body) = bytes.split_first().ok_or(PairingError::MalformedPdu)?;
        let key = |body: &[u8]| -> Result<Key128, PairingError> {
            let arr: [u8; 16] = body.try_into().map_err(|_| PairingError::MalformedPdu)?;
            Ok(Key128::from_bytes(arr))
        };
        match op {
            OP_PAIRING_REQUEST | OP_PAIRING_RESPONSE => {
                let [io, oob, auth] = body else {
                    return Err(PairingError::MalformedPdu);
                };
                let io = IoCapability::from_code(*io).ok_or(PairingError::MalformedPdu)?;
                let oob = match oob {
                    0 => false,
                    1 => true,
                    _ => return Err(PairingError::MalformedPdu),
                };
                let secure_connections = auth & AUTH_REQ_SC != 0;
                Ok(if op == OP_PAIRING_REQUEST {
                    SmpPdu::PairingRequest {
                        io,
                        oob,
                        secure_connections,
                    }
                } else {
                    SmpPdu::PairingResponse {
                        io,
                        oob,
                        secure_connections,
                    }
                })
            }
            OP_CONFIRM => Ok(SmpPdu::Confirm(key(body)?)),
            OP_RANDOM => Ok(SmpPdu::Random(key(body)?)),
            OP_PUBLIC_KEY => {
                let pk: [u8; 64] = body.try_into().map_err(|_| PairingError::MalformedPdu)?;
                Ok(SmpPdu::PublicKey(pk))
            }
            _ => Err(PairingError::MalformedPdu),
        }
    }
}

/// Collects SMP PDUs seen on air and rebuilds the pairing transcript.
#[derive(Debug, Clone, Default)]
pub struct TranscriptCapture {
    request: Option<(IoCapability, bool, bool)>,
    response: Option<(IoCapability, bool, bool)>,
    m_confirm: Option<Key128>,
    s_confirm: Option<Key128>,
    m_rand: Option<Key128>,
    s_rand: Option<Key128>,
    pk_initiator: Option<[u8; 64]>,
    pk_responder: Option<[u8; 64]>,
}

impl TranscriptCapture {
    pub fn new() -> Self {
        Self::default()
    }

    /// `from_initiator` is the frame direction as seen by the sniffer.
    pub fn observe(&mut self, from_initiator: bool, pdu: &SmpPdu) {
        match pdu {
            SmpPdu::PairingRequest {
                io,
                oob,
                secure_connections,
            } => {
                *self = TranscriptCapture::default();
                self.request = Some((*io, *oob, *secure_connections));
            }
            SmpPdu::PairingResponse {
                io,
                oob,
                secure_connections,
            } => self.response = Some((*io, *oob, *secure_connections)),
            SmpPdu::Confirm(k) if from_initiator => self.m_confirm = Some(*k),
            SmpPdu::Confirm(k) => self.s_confirm = Some(*k),
            SmpPdu::Random(k) if from_initiator => self.m_rand = Some(*k),
            SmpPdu::Random(k) => self.s_rand = Some(*k),
            SmpPdu::PublicKey(pk) if from_initiator => self.pk_initiator = Some(*pk),
            SmpPdu::PublicKey(pk) => self.pk_responder = Some(*pk),
        }
    }

    /// Decodes raw bytes and observes them; non-SMP payloads are ignored.
    pub fn observe_bytes(&mut self, from_initiator: bool, bytes: &[u8]) -> bool {
        match SmpPdu::decode(bytes) {
            Ok(pdu) => {
                self.observe(from_initiator, &pdu);
                true
            }
            Err(_) => false,
        }
    }

    /// The transcript once every legacy field has been seen.
    pub fn transcript(&self) -> Option<PairingTranscript> {
        let (i_io, i_oob, i_sc) = self.request?;
        let (r_io, r_oob, r_sc) = self.response?;
        let sc = i_sc && r_sc;
        let public_values = match (sc, self.pk_initiator, self.pk_responder) {
            (true, Some(a), Some(b)) => Some(PublicValues {
                initiator: hex::encode(a),
                responder: hex::encode(b),
            }),
            (true, _, _) => return None,
            (false, _, _) => None,
        };
        Some(PairingTranscript {
            m_rand: self.m_rand?,
            s_rand: self.s_rand?,
            m_confirm: self.m_confirm?,
            s_confirm: self.s_confirm?,
            mode: if sc {
                PairingMode::SecureConnections
            } else {
                PairingMode::LegacyLe
            },
            method: select_association(i_io, r_io, i_oob && r_oob),
            public_values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{
        run_pairing, AssociationMethod, PairingFeatures, PartyInput,
    };
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pdu_round_trip() {
        let pdus = [
            SmpPdu::PairingRequest {
                io: IoCapability::KeyboardDisplay,
                oob: false,
                secure_connections: true,
            },
            SmpPdu::PairingResponse {
                io: IoCapability::NoInputNoOutput,
                oob: true,
                secure_connections: false,
            },
            SmpPdu::Confirm(Key128(0x1234)),
            SmpPdu::Random(Key128(u128::MAX)),
            SmpPdu::PublicKey([7; 64]),
        ];
        for pdu in pdus {
            assert_eq!(SmpPdu::decode(&pdu.encode()), Ok(pdu));
        }
        assert_eq!(
            SmpPdu::encode(&SmpPdu::PairingRequest {
                io: IoCapability::NoInputNoOutput,
                oob: false,
                secure_connections: false
            }),
            vec![0x01, 0x03, 0x00, 0x00]
        );
        assert!(SmpPdu::decode(&[]).is_err());
        assert!(SmpPdu::decode(&[0x03, 1, 2]).is_err());
        assert!(SmpPdu::decode(&[0x0a, 0, 0]).is_err());
    }

    #[test]
    fn capture_rebuilds_transcript() {
        for (mode, method, io_i, io_r) in [
            (
                PairingMode::LegacyLe,
                AssociationMethod::JustWorks,
                IoCapability::KeyboardDisplay,
                IoCapability::NoInputNoOutput,
            ),
            (
                PairingMode::LegacyLe,
                AssociationMethod::Passkey,
                IoCapability::KeyboardOnly,
                IoCapability::DisplayOnly,
            ),
            (
                PairingMode::SecureConnections,
                AssociationMethod::JustWorks,
                IoCapability::DisplayOnly,
                IoCapability::NoInputNoOutput,
            ),
        ] {
            let out = run_pairing(
                PartyInput::default(),
                PartyInput::default(),
                PairingFeatures {
                    initiator_io: io_i,
                    responder_io: io_r,
                    oob: false,
                },
                mode,
                method,
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
            let mut cap = TranscriptCapture::new();
            for (i, (dir, pdu)) in out.pdus.iter().enumerate() {
                if i + 1 < out.pdus.len() {
                    cap.observe_bytes(*dir, &pdu.encode());
                }
            }
            assert!(cap.transcript().is_none());
            let (dir, last) = out.pdus.last().unwrap();
            cap.observe(*dir, last);
            assert_eq!(cap.transcript(), Some(out.transcript));
        }
    }
}
