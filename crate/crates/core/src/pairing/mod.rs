//! Pairing: association-method selection, the legacy TK -> STK key flow, an
//! abstract Secure Connections exchange, and the passive key-recovery attack.
//!
//! The confirm and STK functions are built from AES-128 in a fixed
//! composition (see [`confirm_value`] and [`derive_stk`]). They follow the
//! legacy key flow but are not bit-compatible with sniffed real-world
//! traffic.

mod link;
mod smp;

use std::fmt;

use aes::cipher::{BlockCipherEncrypt, KeyInit};
use aes::Aes128;
use rand::{Rng, RngExt};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use link::{decrypt_link, encrypt_link, LinkCipher, LinkDirection};
pub use smp::{SmpPdu, TranscriptCapture};

/// Largest six-digit passkey.
pub const MAX_PASSKEY: u32 = 999_999;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairingError {
    #[error("passkey {0} is outside 0..=999999")]
    PasskeyOutOfRange(u32),
    #[error("operation requires legacy pairing")]
    ModeViolation,
    #[error("confirm value mismatch: the two sides hold different temporary keys")]
    ConfirmMismatch,
    #[error("link decryption failed authentication")]
    AuthFailure,
    #[error("counter {got} is not above the last accepted {last:?}")]
    CounterReplay { got: u64, last: Option<u64> },
    #[error("malformed security manager PDU")]
    MalformedPdu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoCapability {
    DisplayOnly,
    DisplayYesNo,
    KeyboardOnly,
    NoInputNoOutput,
    KeyboardDisplay,
}

impl IoCapability {
    pub const ALL: [IoCapability; 5] = [
        IoCapability::DisplayOnly,
        IoCapability::DisplayYesNo,
        IoCapability::KeyboardOnly,
        IoCapability::NoInputNoOutput,
        IoCapability::KeyboardDisplay,
    ];

    fn has_display(self) -> bool {
        matches!(
            self,
            IoCapability::DisplayOnly | IoCapability::DisplayYesNo | IoCapability::KeyboardDisplay
        )
    }

    fn has_keyboard(self) -> bool {
        matches!(self, IoCapability::KeyboardOnly | IoCapability::KeyboardDisplay)
    }

    /// SMP IO capability code.
    pub fn code(self) -> u8 {
        match self {
            IoCapability::DisplayOnly => 0x00,
            IoCapability::DisplayYesNo => 0x01,
            IoCapability::KeyboardOnly => 0x02,
            IoCapability::NoInputNoOutput => 0x03,
            IoCapability::KeyboardDisplay => 0x04,
        }
    }

    pub fn from_code(code: u8) -> Option<IoCapability> {
        IoCapability::ALL.into_iter().find(|c| c.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssociationMethod {
    JustWorks,
    Passkey,
    #[serde(rename = "OOB")]
    Oob,
}

impl AssociationMethod {
    /// Just Works never authenticates the peer.
    pub fn authenticated(self) -> bool {
        !matches!(self, AssociationMethod::JustWorks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingMode {
    #[serde(rename = "LegacyLE")]
    LegacyLe,
    SecureConnections,
}

/// Legacy association matrix. OOB wins whenever out-of-band data is
/// available; otherwise Passkey needs a keyboard on one side and a display
/// or keyboard on the other, and everything else falls back to Just Works.
pub fn select_association(
    initiator: IoCapability,
    responder: IoCapability,
    oob_available: bool,
) -> AssociationMethod {
    if oob_available {
        return AssociationMethod::Oob;
    }
    let can_enter = |typist: IoCapability, other: IoCapability| {
        typist.has_keyboard() && (other.has_display() || other.has_keyboard())
    };
    if can_enter(initiator, responder) || can_enter(responder, initiator) {
        AssociationMethod::Passkey
    } else {
        AssociationMethod::JustWorks
    }
}

/// A 128-bit key or nonce. Text and JSON form is 32 lowercase hex digits,
/// most significant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Key128(pub u128);

impl Key128 {
    pub const ZERO: Key128 = Key128(0);

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Key128 {
        Key128(rng.random())
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Key128 {
        Key128(u128::from_be_bytes(bytes))
    }
}

impl fmt::Display for Key128 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for Key128 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key128 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.len() != 32 {
            return Err(serde::de::Error::custom("expected 32 hex digits"));
        }
        u128::from_str_radix(&s, 16)
            .map(Key128)
            .map_err(serde::de::Error::custom)
    }
}

/// AES-128 encryption of one block, keys and blocks taken big-endian.
fn aes_e(key: Key128, block: u128) -> u128 {
    let cipher = Aes128::new(&key.to_bytes().into());
    let mut b = block.to_be_bytes().into();
    cipher.encrypt_block(&mut b);
    u128::from_be_bytes(b.into())
}

/// Temporary key for the chosen association method.
///
/// Just Works uses zero, Passkey embeds the six-digit number in the low
/// bits, OOB draws 128 random bits that travel outside the radio.
pub fn derive_tk<R: Rng + ?Sized>(
    method: AssociationMethod,
    user_input: Option<u32>,
    rng: &mut R,
) -> Result<Key128, PairingError> {
    match method {
        AssociationMethod::JustWorks => Ok(Key128::ZERO),
        AssociationMethod::Passkey => {
            let passkey = user_input.unwrap_or_else(|| rng.random_range(0..=MAX_PASSKEY));
            if passkey > MAX_PASSKEY {
                return Err(PairingError::PasskeyOutOfRange(passkey));
            }
            Ok(Key128(u128::from(passkey)))
        }
        AssociationMethod::Oob => Ok(Key128::random(rng)),
    }
}

/// Padding blocks mixed into the confirm computation, standing in for the
/// pairing-request/response and address fields of the real function.
const CONFIRM_P1: u128 = 0x0000_0000_0000_0000_0710_0003_0401_0000;
const CONFIRM_P2: u128 = 0x0000_0000_c0ff_ee00_0000_0022_d000_0001;

/// `E_tk(E_tk(rand ^ P1) ^ P2)`.
pub fn confirm_value(tk: Key128, rand: Key128) -> Key128 {
    Key128(aes_e(tk, aes_e(tk, rand.0 ^ CONFIRM_P1) ^ CONFIRM_P2))
}

/// Short-term key: `E_tk(E_tk(m_rand) ^ s_rand)`, a two-block CBC-MAC over
/// `m_rand || s_rand` keyed by the TK.
pub fn derive_stk(
    mode: PairingMode,
    tk: Key128,
    m_rand: Key128,
    s_rand: Key128,
) -> Result<Key128, PairingError> {
    if mode != PairingMode::LegacyLe {
        return Err(PairingError::ModeViolation);
    }
    Ok(Key128(aes_e(tk, aes_e(tk, m_rand.0) ^ s_rand.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    pub tk: Key128,
    pub stk: Option<Key128>,
    pub ltk: Option<Key128>,
}

impl KeyMaterial {
    /// STK for legacy pairing, LTK for Secure Connections.
    pub fn session_key(&self) -> Key128 {
        self.stk.or(self.ltk).unwrap_or(Key128::ZERO)
    }
}

/// Opaque public values exchanged in Secure Connections. Independent of
/// the LTK by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicValues {
    pub initiator: String,
    pub responder: String,
}

/// Everything a passive sniffer sees during pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingTranscript {
    #[serde(rename = "mRand")]
    pub m_rand: Key128,
    #[serde(rename = "sRand")]
    pub s_rand: Key128,
    #[serde(rename = "mConfirm")]
    pub m_confirm: Key128,
    #[serde(rename = "sConfirm")]
    pub s_confirm: Key128,
    pub mode: PairingMode,
    pub method: AssociationMethod,
    #[serde(rename = "publicValues", default, skip_serializing_if = "Option::is_none")]
    pub public_values: Option<PublicValues>,
}

/// What a user typed or was shown on one side of the pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartyInput {
    pub passkey: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingOutcome {
    pub initiator: KeyMaterial,
    pub responder: KeyMaterial,
    pub transcript: PairingTranscript,
    /// On-air PDUs in order; `true` marks initiator-to-responder.
    pub pdus: Vec<(bool, SmpPdu)>,
}

/// The pairing capabilities each side advertises in its request/response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairingFeatures {
    pub initiator_io: IoCapability,
    pub responder_io: IoCapability,
    pub oob: bool,
}

/// Runs the full exchange between two parties.
///
/// When neither side supplies a passkey in Passkey mode, the displaying
/// side shows a random one and the user types it in correctly. Mismatched
/// entries surface as [`PairingError::ConfirmMismatch`].
pub fn run_pairing<R: Rng + ?Sized>(
    initiator: PartyInput,
    responder: PartyInput,
    features: PairingFeatures,
    mode: PairingMode,
    method: AssociationMethod,
    rng: &mut R,
) -> Result<PairingOutcome, PairingError> {
    let (tk_i, tk_r) = match method {
        AssociationMethod::Passkey => {
            let shown = match (initiator.passkey, responder.passkey) {
                (Some(p), _) | (None, Some(p)) => p,
                (None, None) => rng.random_range(0..=MAX_PASSKEY),
            };
            let tk_i = derive_tk(method, Some(initiator.passkey.unwrap_or(shown)), rng)?;
            let tk_r = derive_tk(method, Some(responder.passkey.unwrap_or(shown)), rng)?;
            (tk_i, tk_r)
        }
        _ => {
            let tk = derive_tk(method, None, rng)?;
            (tk, tk)
        }
    };

    let sc = mode == PairingMode::SecureConnections;
    let mut pdus = vec![
        (
            true,
            SmpPdu::PairingRequest {
                io: features.initiator_io,
                oob: features.oob,
                secure_connections: sc,
            },
        ),
        (
            false,
            SmpPdu::PairingResponse {
                io: features.responder_io,
                oob: features.oob,
                secure_connections: sc,
            },
        ),
    ];
    let public_values = if sc {
        let mut pk_i = [0u8; 64];
        let mut pk_r = [0u8; 64];
        rng.fill_bytes(&mut pk_i);
        rng.fill_bytes(&mut pk_r);
        pdus.push((true, SmpPdu::PublicKey(pk_i)));
        pdus.push((false, SmpPdu::PublicKey(pk_r)));
        Some(PublicValues {
            initiator: hex::encode(pk_i),
            responder: hex::encode(pk_r),
        })
    } else {
        None
    };

    let m_rand = Key128::random(rng);
    let s_rand = Key128::random(rng);
    let m_confirm = confirm_value(tk_i, m_rand);
    let s_confirm = confirm_value(tk_r, s_rand);
    pdus.push((true, SmpPdu::Confirm(m_confirm)));
    pdus.push((false, SmpPdu::Confirm(s_confirm)));
    pdus.push((true, SmpPdu::Random(m_rand)));

    // Responder checks the initiator's confirm before revealing its random.
    if confirm_value(tk_r, m_rand) != m_confirm {
        return Err(PairingError::ConfirmMismatch);
    }
    pdus.push((false, SmpPdu::Random(s_rand)));
    if confirm_value(tk_i, s_rand) != s_confirm {
        return Err(PairingError::ConfirmMismatch);
    }

    let (initiator_keys, responder_keys) = if sc {
        // Key agreement is abstract: both sides receive the same fresh LTK.
        let ltk = Key128::random(rng);
        (
            KeyMaterial {
                tk: tk_i,
                stk: None,
                ltk: Some(ltk),
            },
            KeyMaterial {
                tk: tk_r,
                stk: None,
                ltk: Some(ltk),
            },
        )
    } else {
        let stk_i = derive_stk(mode, tk_i, m_rand, s_rand)?;
        let stk_r = derive_stk(mode, tk_r, m_rand, s_rand)?;
        (
            KeyMaterial {
                tk: tk_i,
                stk: Some(stk_i),
                ltk: None,
            },
            KeyMaterial {
                tk: tk_r,
                stk: Some(stk_r),
                ltk: None,
            },
        )
    };

    Ok(PairingOutcome {
        initiator: initiator_keys,
        responder: responder_keys,
        transcript: PairingTranscript {
            m_rand,
            s_rand,
            m_confirm,
            s_confirm,
            mode,
            method,
            public_values,
        },
        pdus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryFailure {
    /// Key agreement leaves nothing in the transcript to search.
    SecureConnections,
    /// 128-bit TK exchanged outside the radio.
    OutOfBand,
    /// No candidate TK reproduces the captured confirm value.
    NoMatchingTk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    Recovered {
        stk: Key128,
        tk: Key128,
        candidates_checked: u32,
    },
    Failure(RecoveryFailure),
}

impl Recovery {
    pub fn stk(&self) -> Option<Key128> {
        match self {
            Recovery::Recovered { stk, .. } => Some(*stk),
            Recovery::Failure(_) => None,
        }
    }
}

/// Passive attack on a captured transcript.
///
/// Legacy Just Works: TK is zero, so the STK follows directly. Legacy
/// Passkey: every six-digit TK is tried against the initiator's confirm
/// value. OOB and Secure Connections transcripts are out of reach.
pub fn eavesdrop_recover(transcript: &PairingTranscript) -> Recovery {
    if transcript.mode == PairingMode::SecureConnections {
        return Recovery::Failure(RecoveryFailure::SecureConnections);
    }
    let candidates = match transcript.method {
        AssociationMethod::Oob => return Recovery::Failure(RecoveryFailure::OutOfBand),
        AssociationMethod::JustWorks => 0..=0,
        AssociationMethod::Passkey => 0..=MAX_PASSKEY,
    };
    for (checked, candidate) in candidates.enumerate() {
        let tk = Key128(u128::from(candidate));
        if confirm_value(tk, transcript.m_rand) == transcript.m_confirm {
            let stk = derive_stk(transcript.mode, tk, transcript.m_rand, transcript.s_rand)
                .expect("legacy mode checked above");
            return Recovery::Recovered {
                stk,
                tk,
                candidates_checked: checked as u32 + 1,
            };
        }
    }
    Recovery::Failure(RecoveryFailure::NoMatchingTk)
}
