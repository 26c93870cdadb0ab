//! Victim devices: the heart-rate sensor (peripheral) and the fitness app
//! (central), plus the heart-rate source that drives the sensor.

use std::collections::BTreeSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::att::{AttPdu, ECHO_OK, ECHO_REJECTED};
use crate::detection::{Alert, DetectorConfig, RssiDetector, RttDetector};
use crate::gatt::{
    build_heart_rate_profile, AttributeDatabase, GattError, GattOp, HeartRateMeasurement, OpKind,
    Uuid, HEART_RATE_MEASUREMENT, HEART_RATE_SERVICE,
};
use crate::pairing::IoCapability;
use crate::radio::{Address, AdvertisingData, DeviceId, TimeMs};

/// Advertised name of the simulated sensor.
pub const SENSOR_NAME: &str = "PolarSim H7";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActorError {
    #[error("heart-rate walk needs min <= max, got {min}..{max}")]
    InvalidWalk { min: u16, max: u16 },
    #[error("peripheral rejects echo requests")]
    Unsupported,
    #[error("notify interval must be positive")]
    ZeroInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeartRateSource {
    Constant {
        bpm: u16,
    },
    /// Starts at the midpoint of `[min, max]` and moves by a uniform step in
    /// `[-step_max, step_max]` per tick, clamped to the range.
    SeededWalk {
        seed: u64,
        min: u16,
        max: u16,
        step_max: u16,
    },
}

impl Default for HeartRateSource {
    fn default() -> Self {
        HeartRateSource::Constant { bpm: 70 }
    }
}

impl HeartRateSource {
    pub fn validate(&self) -> Result<(), ActorError> {
        match *self {
            HeartRateSource::SeededWalk { min, max, .. } if min > max => {
                Err(ActorError::InvalidWalk { min, max })
            }
            _ => Ok(()),
        }
    }

    pub fn generator(&self) -> HrGenerator {
        HrGenerator::new(*self)
    }
}

#[derive(Debug, Clone)]
pub struct HrGenerator {
    source: HeartRateSource,
    rng: Option<ChaCha8Rng>,
    current: Option<u16>,
}

impl HrGenerator {
    pub fn new(source: HeartRateSource) -> HrGenerator {
        let rng = match source {
            HeartRateSource::SeededWalk { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            HeartRateSource::Constant { .. } => None,
        };
        HrGenerator {
            source,
            rng,
            current: None,
        }
    }

    pub fn next_bpm(&mut self) -> u16 {
        let bpm = match self.source {
            HeartRateSource::Constant { bpm } => bpm,
            HeartRateSource::SeededWalk {
                min, max, step_max, ..
            } => match self.current {
                None => min + (max - min) / 2,
                Some(cur) => {
                    let rng = self.rng.as_mut().expect("walk has an rng");
                    let step = i32::from(step_max);
                    let delta = rng.random_range(-step..=step);
                    (i32::from(cur) + delta).clamp(i32::from(min), i32::from(max)) as u16
                }
            },
        };
        self.current = Some(bpm);
        bpm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmittedHr {
    pub time_ms: TimeMs,
    pub bpm: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeripheralSettings {
    pub io: IoCapability,
    pub notify_interval_ms: TimeMs,
    pub adv_interval_ms: TimeMs,
    pub supports_echo: bool,
}

impl Default for PeripheralSettings {
    fn default() -> Self {
        PeripheralSettings {
            io: IoCapability::NoInputNoOutput,
            notify_interval_ms: 1000,
            adv_interval_ms: 100,
            supports_echo: false,
        }
    }
}

/// The heart-rate sensor: a GATT server with the heart-rate profile that
/// notifies 0x2A37 once per interval while subscribed.
#[derive(Debug, Clone)]
pub struct PeripheralDevice {
    pub id: DeviceId,
    pub address: Address,
    pub settings: PeripheralSettings,
    pub adv: AdvertisingData,
    pub db: AttributeDatabase,
    pub peer: Option<DeviceId>,
    pub emitted: Vec<EmittedHr>,
    hr: HrGenerator,
    next_op_id: u64,
}

impl PeripheralDevice {
    pub fn new(
        id: DeviceId,
        address: Address,
        settings: PeripheralSettings,
        source: HeartRateSource,
    ) -> Result<PeripheralDevice, ActorError> {
        source.validate()?;
        if settings.notify_interval_ms == 0 || settings.adv_interval_ms == 0 {
            return Err(ActorError::ZeroInterval);
        }
        Ok(PeripheralDevice {
            id,
            address,
            settings,
            adv: AdvertisingData {
                connectable: true,
                name: SENSOR_NAME.into(),
                services: vec![HEART_RATE_SERVICE],
            },
            db: build_heart_rate_profile(),
            peer: None,
            emitted: Vec::new(),
            hr: source.generator(),
            next_op_id: 0,
        })
    }

    pub fn connect(&mut self, peer: DeviceId) {
        self.peer = Some(peer);
    }

    /// Subscriptions do not survive the link (no bonding).
    pub fn disconnect(&mut self) {
        self.peer = None;
        self.db.clear_subscriptions();
    }

    /// One notify-interval tick. The source advances on every tick; a
    /// Notify is produced only for a connected, subscribed client.
    pub fn tick(&mut self, time_ms: TimeMs) -> Option<GattOp> {
        let bpm = self.hr.next_bpm();
        let payload = HeartRateMeasurement::fitting(u32::from(bpm))
            .encode()
            .expect("fitting always encodes");
        self.db
            .set_value(HEART_RATE_MEASUREMENT, &payload)
            .expect("profile has 0x2A37");
        if self.peer.is_none() || !self.db.is_subscribed(HEART_RATE_MEASUREMENT) {
            return None;
        }
        self.emitted.push(EmittedHr { time_ms, bpm });
        self.next_op_id += 1;
        Some(GattOp::new(
            OpKind::Notify,
            HEART_RATE_MEASUREMENT,
            payload,
            self.next_op_id,
        ))
    }

    /// Serves a client request.
    pub fn handle_att(&mut self, pdu: &AttPdu) -> Option<AttPdu> {
        match pdu {
            AttPdu::DiscoverReq { op_id } => Some(AttPdu::DiscoverRsp {
                op_id: *op_id,
                layout: self.db.encode_layout(),
            }),
            AttPdu::Op(op) => match self.db.apply(op) {
                Ok(rsp) => rsp.map(AttPdu::Op),
                Err(e) => Some(AttPdu::Error {
                    op_id: op.op_id,
                    code: att_error_code(&e),
                }),
            },
            AttPdu::Error { .. } | AttPdu::DiscoverRsp { .. } => None,
        }
    }

    /// Response payload for an echo request.
    pub fn echo_status(&self) -> u8 {
        if self.settings.supports_echo {
            ECHO_OK
        } else {
            ECHO_REJECTED
        }
    }
}

/// ATT-style error codes.
pub fn att_error_code(e: &GattError) -> u8 {
    match e {
        GattError::UnknownUuid(_) => 0x0a,
        GattError::PropertyViolation {
            kind: OpKind::Read, ..
        } => 0x02,
        GattError::PropertyViolation { .. } => 0x03,
        GattError::ValueTooLong(_) => 0x0d,
        _ => 0x0e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralPhase {
    Idle,
    Scanning,
    Connecting,
    Pairing,
    Discovering,
    Subscribing,
    Ready,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceivedHr {
    pub time_ms: TimeMs,
    pub bpm: u16,
    pub rssi_dbm: f64,
    pub from: Address,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RttStatus {
    Idle,
    Active,
    Unsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub time_ms: TimeMs,
    pub rtt_ms: f64,
}

/// The fitness app. Scans for the sensor by name, pairs, discovers,
/// subscribes to 0x2A37 and monitors RSSI and, optionally, RTT.
#[derive(Debug, Clone)]
pub struct CentralDevice {
    pub id: DeviceId,
    pub address: Address,
    pub io: IoCapability,
    pub target_name: String,
    pub rssi_monitor_enabled: bool,
    pub rtt_probe_interval_ms: Option<TimeMs>,
    pub phase: CentralPhase,
    pub peer: Option<DeviceId>,
    pub peer_address: Option<Address>,
    pub subscriptions: BTreeSet<Uuid>,
    pub received: Vec<ReceivedHr>,
    pub rssi_trace: Vec<(TimeMs, f64)>,
    pub rtt_trace: Vec<RttSample>,
    pub rtt_status: RttStatus,
    pub alerts: Vec<Alert>,
    pub failure: Option<String>,
    rssi_detector: RssiDetector,
    rtt_detector: RttDetector,
    next_op_id: u64,
    next_echo_id: u8,
}

impl CentralDevice {
    pub fn new(
        id: DeviceId,
        address: Address,
        io: IoCapability,
        detector: DetectorConfig,
        rtt_probe_interval_ms: Option<TimeMs>,
    ) -> CentralDevice {
        CentralDevice {
            id,
            address,
            io,
            target_name: SENSOR_NAME.into(),
            rssi_monitor_enabled: true,
            rtt_probe_interval_ms,
            phase: CentralPhase::Idle,
            peer: None,
            peer_address: None,
            subscriptions: BTreeSet::new(),
            received: Vec::new(),
            rssi_trace: Vec::new(),
            rtt_trace: Vec::new(),
            rtt_status: if rtt_probe_interval_ms.is_some() {
                RttStatus::Active
            } else {
                RttStatus::Idle
            },
            alerts: Vec::new(),
            failure: None,
            rssi_detector: RssiDetector::new(detector),
            rtt_detector: RttDetector::new(&detector),
            next_op_id: 0,
            next_echo_id: 0,
        }
    }

    pub fn rssi_detector(&self) -> &RssiDetector {
        &self.rssi_detector
    }

    pub fn rtt_detector(&self) -> &RttDetector {
        &self.rtt_detector
    }

    pub fn next_op_id(&mut self) -> u64 {
        self.next_op_id += 1;
        self.next_op_id
    }

    pub fn next_echo_id(&mut self) -> u8 {
        self.next_echo_id = self.next_echo_id.wrapping_add(1);
        self.next_echo_id
    }

    pub fn matches_target(&self, adv: &AdvertisingData) -> bool {
        adv.connectable && adv.name == self.target_name
    }

    /// Subscriptions are per link.
    pub fn disconnect(&mut self) {
        self.peer = None;
        self.peer_address = None;
        self.subscriptions.clear();
        if self.phase != CentralPhase::Failed {
            self.phase = CentralPhase::Idle;
        }
    }

    pub fn fail(&mut self, reason: impl Into<String>) {
        self.phase = CentralPhase::Failed;
        self.failure = Some(reason.into());
    }

    /// Handles a 0x2A37 notification; returns a detector alert if raised.
    pub fn on_notification(&mut self, time_ms: TimeMs, op: &GattOp, rssi_dbm: f64) -> Option<Alert> {
        if op.target != HEART_RATE_MEASUREMENT || !self.subscriptions.contains(&op.target) {
            return None;
        }
        if let Ok(m) = HeartRateMeasurement::decode(&op.payload) {
            self.received.push(ReceivedHr {
                time_ms,
                bpm: m.bpm,
                rssi_dbm,
                from: self.peer_address.unwrap_or_default(),
            });
        }
        if !self.rssi_monitor_enabled {
            return None;
        }
        self.rssi_trace.push((time_ms, rssi_dbm));
        let alert = self.rssi_detector.update(time_ms, rssi_dbm);
        self.alerts.extend(alert);
        alert
    }

    /// Handles an echo response. A rejection switches the probe off.
    pub fn on_echo(&mut self, time_ms: TimeMs, status: u8, rtt_ms: f64) -> Result<Option<Alert>, ActorError> {
        if status != ECHO_OK {
            self.rtt_status = RttStatus::Unsupported;
            self.rtt_detector.mark_unsupported();
            return Err(ActorError::Unsupported);
        }
        self.rtt_trace.push(RttSample { time_ms, rtt_ms });
        let alert = self.rtt_detector.update(time_ms, rtt_ms);
        self.alerts.extend(alert);
        Ok(alert)
    }

    /// Probe ticks are due while connected and the peer has not rejected
    /// echo.
    pub fn wants_rtt_probe(&self) -> bool {
        self.rtt_status == RttStatus::Active && self.phase == CentralPhase::Ready
    }
}
