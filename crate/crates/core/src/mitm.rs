//! Active MitM session: the interception core (fake central toward the real
//! sensor) and the proxy face (fake peripheral toward the real app).
//!
//! The session is transport-agnostic. The simulation feeds it every GATT
//! operation crossing the proxy through [`MitmSession::forward`] and sends
//! whatever it releases.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatt::{AttributeDatabase, GattOp, HeartRateMeasurement, OpKind, Uuid, HEART_RATE_MEASUREMENT};
use crate::radio::{Address, AdvertisingData, TimeMs};

/// Wire op ids of proxy-originated operations (replays) have this bit set
/// so they never collide with ids chosen by the victims.
pub const PROXY_OP_ID_BIT: u64 = 1 << 63;

pub const DEFAULT_HOLD_TIMEOUT_MS: TimeMs = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MitmError {
    #[error("target has not been seen advertising")]
    TargetNotObserved,
    #[error("victim central is already connected to the target")]
    VictimAlreadyConnected,
    #[error("operation {0} is not held")]
    NotHeld(u64),
    #[error("unknown journal op id {0}")]
    UnknownOpId(u64),
    #[error("session is {0:?}, expected {1:?}")]
    WrongState(SessionState, SessionState),
    #[error("fake address {0} collides with a real device")]
    AddressCollision(Address),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Cloning,
    Ready,
    Active,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToCentral,
    ToPeripheral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleDirection {
    ToCentral,
    ToPeripheral,
    Both,
}

impl RuleDirection {
    pub fn covers(self, d: Direction) -> bool {
        matches!(
            (self, d),
            (RuleDirection::Both, _)
                | (RuleDirection::ToCentral, Direction::ToCentral)
                | (RuleDirection::ToPeripheral, Direction::ToPeripheral)
        )
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Passthrough,
    ConstantOverride {
        #[serde(rename = "bytes_hex", with = "hex_bytes")]
        bytes: Vec<u8>,
    },
    HrOverride {
        bpm: u16,
    },
    HrOffset {
        delta: i32,
    },
}

impl Transform {
    /// Applies the transform. Heart-rate transforms keep the sensor-contact
    /// flags and re-encode in the narrowest format; an undecodable value is
    /// left alone by `HrOffset` and replaced outright by `HrOverride`.
    pub fn apply(&self, payload: &[u8]) -> Vec<u8> {
        match self {
            Transform::Passthrough => payload.to_vec(),
            Transform::ConstantOverride { bytes } => bytes.clone(),
            Transform::HrOverride { bpm } => {
                let contact = HeartRateMeasurement::decode(payload)
                    .ok()
                    .and_then(|m| m.sensor_contact);
                encode_hr(u32::from(*bpm), contact)
            }
            Transform::HrOffset { delta } => match HeartRateMeasurement::decode(payload) {
                Ok(m) => {
                    let bpm = (i64::from(m.bpm) + i64::from(*delta)).clamp(0, i64::from(u16::MAX));
                    encode_hr(bpm as u32, m.sensor_contact)
                }
                Err(_) => payload.to_vec(),
            },
        }
    }

    fn is_hr(&self) -> bool {
        matches!(self, Transform::HrOverride { .. } | Transform::HrOffset { .. })
    }
}

fn encode_hr(bpm: u32, contact: Option<bool>) -> Vec<u8> {
    HeartRateMeasurement::fitting(bpm)
        .with_contact(contact)
        .encode()
        .expect("fitting always encodes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModificationRule {
    pub match_uuid: Uuid,
    pub direction: RuleDirection,
    pub transform: Transform,
}

impl ModificationRule {
    pub fn validate(&self) -> Result<(), MitmError> {
        if self.transform.is_hr() && self.match_uuid != HEART_RATE_MEASUREMENT {
            return Err(MitmError::InvalidRule(format!(
                "heart-rate transform on {}",
                self.match_uuid
            )));
        }
        Ok(())
    }

    pub fn matches(&self, uuid: Uuid, direction: Direction) -> bool {
        self.match_uuid == uuid && self.direction.covers(direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "auto")]
    Auto,
    #[serde(rename = "manual-forward")]
    ManualForward,
    #[serde(rename = "manual-modify")]
    ManualModify,
    #[serde(rename = "manual-drop")]
    ManualDrop,
    #[serde(rename = "timeout-forward")]
    TimeoutForward,
    /// Awaiting an operator decision.
    #[serde(rename = "held")]
    Held,
}

/// One line of `journal.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpLogEntry {
    pub op_id: u64,
    pub time_ms: TimeMs,
    pub direction: Direction,
    pub uuid: Uuid,
    pub before_hex: String,
    pub after_hex: String,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
struct JournalSlot {
    entry: OpLogEntry,
    kind: OpKind,
    wire_op_id: u64,
}

#[derive(Debug, Clone)]
struct HeldOp {
    deadline_ms: TimeMs,
    proposed: Vec<u8>,
}

/// An operation released toward `direction`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub journal_id: u64,
    pub direction: Direction,
    pub op: GattOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardOutcome {
    Send(Release),
    /// Held for the operator until `deadline_ms`.
    Held { journal_id: u64, deadline_ms: TimeMs },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OperatorAction {
    Forward,
    Modify(Vec<u8>),
    Drop,
}

/// The cloned proxy face.
#[derive(Debug, Clone, PartialEq)]
pub struct FakePeripheral {
    pub address: Address,
    pub adv: AdvertisingData,
    pub db: AttributeDatabase,
}

#[derive(Debug, Clone)]
pub struct MitmSession {
    pub target: Address,
    pub fake_address: Address,
    pub state: SessionState,
    pub manual_mode: bool,
    pub hold_timeout_ms: TimeMs,
    /// Meters.
    pub attacker_distance_to_central: f64,
    rules: Vec<ModificationRule>,
    observed: Option<AdvertisingData>,
    journal: Vec<JournalSlot>,
    held: BTreeMap<u64, HeldOp>,
    next_id: u64,
}

impl MitmSession {
    /// `known` lists every real device address; the fake must differ from
    /// all of them.
    pub fn new(target: Address, fake_address: Address, known: &[Address]) -> Result<MitmSession, MitmError> {
        if fake_address == target || known.contains(&fake_address) {
            return Err(MitmError::AddressCollision(fake_address));
        }
        Ok(MitmSession {
            target,
            fake_address,
            state: SessionState::Cloning,
            manual_mode: false,
            hold_timeout_ms: DEFAULT_HOLD_TIMEOUT_MS,
            attacker_distance_to_central: 0.5,
            rules: Vec::new(),
            observed: None,
            journal: Vec::new(),
            held: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn rules(&self) -> &[ModificationRule] {
        &self.rules
    }

    pub fn set_rules(&mut self, rules: Vec<ModificationRule>) -> Result<(), MitmError> {
        for r in &rules {
            r.validate()?;
        }
        self.rules = rules;
        Ok(())
    }

    pub fn journal(&self) -> impl Iterator<Item = &OpLogEntry> {
        self.journal.iter().map(|s| &s.entry)
    }

    pub fn entry(&self, journal_id: u64) -> Option<&OpLogEntry> {
        self.slot(journal_id).map(|s| &s.entry)
    }

    fn slot(&self, journal_id: u64) -> Option<&JournalSlot> {
        // Ids are 1-based and dense.
        let idx = usize::try_from(journal_id.checked_sub(1)?).ok()?;
        self.journal.get(idx)
    }

    fn slot_mut(&mut self, journal_id: u64) -> Option<&mut JournalSlot> {
        let idx = usize::try_from(journal_id.checked_sub(1)?).ok()?;
        self.journal.get_mut(idx)
    }

    pub fn held_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.held.keys().copied()
    }

    pub fn held_deadline(&self, journal_id: u64) -> Option<TimeMs> {
        self.held.get(&journal_id).map(|h| h.deadline_ms)
    }

    pub fn write_journal<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in self.journal() {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Records an advertisement heard by the interception core.
    pub fn observe_advertisement(&mut self, address: Address, adv: &AdvertisingData) {
        if address == self.target && adv.connectable {
            self.observed = Some(adv.clone());
        }
    }

    pub fn has_observed_target(&self) -> bool {
        self.observed.is_some()
    }

    /// Builds the proxy face from the target's advertisement and the
    /// database the interception core discovered.
    pub fn clone_target(&mut self, target_db: &AttributeDatabase) -> Result<FakePeripheral, MitmError> {
        self.expect_state(SessionState::Cloning)?;
        let adv = self.observed.clone().ok_or(MitmError::TargetNotObserved)?;
        self.state = SessionState::Ready;
        Ok(FakePeripheral {
            address: self.fake_address,
            adv,
            db: target_db.structural_copy(),
        })
    }

    pub fn start_session(&mut self, victim_connected_to_target: bool) -> Result<(), MitmError> {
        self.expect_state(SessionState::Ready)?;
        if victim_connected_to_target {
            return Err(MitmError::VictimAlreadyConnected);
        }
        self.state = SessionState::Active;
        Ok(())
    }

    /// Stops relaying. Ops still held are resolved as timeout-forwarded;
    /// with both links gone they reach nobody.
    pub fn stop_session(&mut self) {
        let ids: Vec<u64> = self.held.keys().copied().collect();
        for id in ids {
            let _ = self.resolve(id, Decision::TimeoutForward, None);
        }
        self.state = SessionState::Stopped;
    }

    fn expect_state(&self, want: SessionState) -> Result<(), MitmError> {
        if self.state == want {
            Ok(())
        } else {
            Err(MitmError::WrongState(self.state, want))
        }
    }

    fn push(&mut self, time_ms: TimeMs, direction: Direction, op: &GattOp, after: &[u8], decision: Decision, wire_op_id: u64) -> u64 {
        self.next_id += 1;
        self.journal.push(JournalSlot {
            entry: OpLogEntry {
                op_id: self.next_id,
                time_ms,
                direction,
                uuid: op.target,
                before_hex: hex::encode(&op.payload),
                after_hex: hex::encode(after),
                decision,
            },
            kind: op.kind,
            wire_op_id,
        });
        self.next_id
    }

    /// Runs one intercepted operation through the rules.
    ///
    /// The first matching rule wins; unmatched ops pass through untouched.
    /// In manual mode matched ops are held. With an empty rule list every
    /// op counts as matched, so manual mode alone intercepts everything.
    pub fn forward(&mut self, time_ms: TimeMs, direction: Direction, op: GattOp) -> Result<ForwardOutcome, MitmError> {
        self.expect_state(SessionState::Active)?;
        let rule = self.rules.iter().find(|r| r.matches(op.target, direction));
        let matched = rule.is_some() || self.rules.is_empty();
        let after = rule.map_or_else(|| op.payload.clone(), |r| r.transform.apply(&op.payload));
        if self.manual_mode && matched {
            let deadline_ms = time_ms + self.hold_timeout_ms;
            let id = self.push(time_ms, direction, &op, &after, Decision::Held, op.op_id);
            self.held.insert(
                id,
                HeldOp {
                    deadline_ms,
                    proposed: after,
                },
            );
            return Ok(ForwardOutcome::Held {
                journal_id: id,
                deadline_ms,
            });
        }
        let id = self.push(time_ms, direction, &op, &after, Decision::Auto, op.op_id);
        Ok(ForwardOutcome::Send(Release {
            journal_id: id,
            direction,
            op: GattOp::new(op.kind, op.target, after, op.op_id),
        }))
    }

    fn resolve(&mut self, id: u64, decision: Decision, bytes: Option<Vec<u8>>) -> Result<Option<Release>, MitmError> {
        let held = self.held.remove(&id).ok_or(MitmError::NotHeld(id))?;
        let after = bytes.unwrap_or(held.proposed);
        let slot = self.slot_mut(id).expect("held ops are journaled");
        slot.entry.decision = decision;
        slot.entry.after_hex = hex::encode(&after);
        if decision == Decision::ManualDrop {
            return Ok(None);
        }
        Ok(Some(Release {
            journal_id: id,
            direction: slot.entry.direction,
            op: GattOp::new(slot.kind, slot.entry.uuid, after, slot.wire_op_id),
        }))
    }

    /// Applies an operator decision to a held op. Returns the op to send,
    /// or `None` when dropped.
    pub fn decide(&mut self, journal_id: u64, action: OperatorAction) -> Result<Option<Release>, MitmError> {
        match action {
            OperatorAction::Forward => self.resolve(journal_id, Decision::ManualForward, None),
            OperatorAction::Modify(bytes) => self.resolve(journal_id, Decision::ManualModify, Some(bytes)),
            OperatorAction::Drop => self.resolve(journal_id, Decision::ManualDrop, None),
        }
    }

    /// Releases a held op whose deadline has passed, as proposed by the
    /// rules. No-op if it was already decided.
    pub fn expire(&mut self, journal_id: u64, now: TimeMs) -> Option<Release> {
        let due = self.held.get(&journal_id)?.deadline_ms <= now;
        if !due {
            return None;
        }
        self.resolve(journal_id, Decision::TimeoutForward, None).ok().flatten()
    }

    /// Re-sends a journaled op's after-bytes in its original direction with
    /// a fresh id.
    pub fn replay(&mut self, time_ms: TimeMs, journal_id: u64) -> Result<Release, MitmError> {
        let slot = self.slot(journal_id).ok_or(MitmError::UnknownOpId(journal_id))?;
        self.expect_state(SessionState::Active)?;
        let bytes = hex::decode(&slot.entry.after_hex).expect("journal hex is well formed");
        let direction = slot.entry.direction;
        let op = GattOp::new(slot.kind, slot.entry.uuid, bytes.clone(), 0);
        let wire = (self.next_id + 1) | PROXY_OP_ID_BIT;
        let id = self.push(time_ms, direction, &op, &bytes, Decision::Auto, wire);
        Ok(Release {
            journal_id: id,
            direction,
            op: GattOp::new(op.kind, op.target, bytes, wire),
        })
    }
}
