//! Control API messages. Clients send [`Command`]s; the simulation loop
//! applies them between events and answers with [`ServerEvent`]s.

use serde::{Deserialize, Serialize};

use crate::detection::AlertKind;
use crate::gatt::Uuid;
use crate::mitm::{Decision, Direction, ModificationRule, SessionState};
use crate::radio::{Address, DeviceId, GapRole, TimeMs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    Modify,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    ListDevices {},
    /// `target` is a device name or address.
    StartMitm {
        target: String,
    },
    StopMitm {},
    SetRules {
        rules: Vec<ModificationRule>,
    },
    SetManual {
        on: bool,
    },
    Decision {
        op_id: u64,
        action: Action,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bytes_hex: Option<String>,
    },
    Replay {
        op_id: u64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ListDevices {} => "list_devices",
            Command::StartMitm { .. } => "start_mitm",
            Command::StopMitm {} => "stop_mitm",
            Command::SetRules { .. } => "set_rules",
            Command::SetManual { .. } => "set_manual",
            Command::Decision { .. } => "decision",
            Command::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerEvent {
    Device {
        id: DeviceId,
        name: String,
        address: Address,
        role: GapRole,
        is_fake: bool,
        rssi: Option<f64>,
        connected_to: Option<Address>,
    },
    Session {
        state: SessionState,
        target: Address,
        fake_address: Address,
        time_ms: TimeMs,
    },
    Op {
        op_id: u64,
        time_ms: TimeMs,
        direction: Direction,
        uuid: Uuid,
        before_hex: String,
        after_hex: String,
        held: bool,
        decision: Decision,
        #[serde(skip_serializing_if = "Option::is_none")]
        deadline_ms: Option<TimeMs>,
    },
    Alert {
        kind: AlertKind,
        time_ms: TimeMs,
        score: f64,
    },
    Rssi {
        time_ms: TimeMs,
        dbm: f64,
    },
    /// A heart-rate reading decoded by the victim app.
    Hr {
        time_ms: TimeMs,
        bpm: u16,
        from: Address,
    },
    Ack {
        command: String,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        command: Option<String>,
        message: String,
    },
}
