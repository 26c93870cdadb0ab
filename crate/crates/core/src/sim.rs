//! The fitness scenario as one deterministic discrete-event world: the
//! heart-rate sensor, the phone app, and the attacker's interception core
//! and proxy face, all sharing one medium.
//!
//! Randomness comes from three ChaCha8 streams of the scenario seed:
//! 1 for RSSI shadowing, 2 for pairing nonces and 3 for the attacker.
//! Control commands are applied between events.

use std::collections::BTreeMap;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actors::{CentralDevice, CentralPhase, PeripheralDevice, PeripheralSettings, SENSOR_NAME};
use crate::att::{split_channel, with_channel, AttPdu, CHANNEL_ATT, CHANNEL_SMP, ECHO_REJECTED};
use crate::config::{ConfigError, ScenarioConfig};
use crate::control::{Action, Command, ServerEvent};
use crate::detection::Alert;
use crate::gatt::{AttributeDatabase, GattOp, OpKind, HEART_RATE_MEASUREMENT, HEART_RATE_SERVICE};
use crate::mitm::{
    Direction, FakePeripheral, ForwardOutcome, MitmError, MitmSession, ModificationRule,
    OperatorAction, Release, SessionState,
};
use crate::pairing::{
    run_pairing, select_association, Key128, LinkCipher, LinkDirection, PairingError,
    PairingFeatures, PairingTranscript, PartyInput, SmpPdu, MAX_PASSKEY,
};
use crate::radio::{
    Address, AdvertisingData, ConnectionId, DeviceId, EventQueue, Gap, GapEvent, GapNotice,
    GapRole, Medium, RadioLink, ScanFilter, TimeMs,
};

pub const SENSOR: DeviceId = DeviceId(1);
pub const PHONE: DeviceId = DeviceId(2);
pub const CORE: DeviceId = DeviceId(3);
pub const FAKE: DeviceId = DeviceId(4);

pub const SENSOR_ADDRESS: Address = Address([0xc4, 0x7c, 0x8d, 0x6a, 0x00, 0x01]);
pub const PHONE_ADDRESS: Address = Address([0x5c, 0xf9, 0x38, 0x00, 0x00, 0x02]);
pub const CORE_ADDRESS: Address = Address([0x00, 0x1a, 0x7d, 0xda, 0x71, 0x03]);

const STREAM_PAIRING: u64 = 2;
const STREAM_ATTACKER: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Gap(GapEvent),
    NotifyTick,
    RttProbe,
    MitmStart,
    PhoneScan,
    /// A released op leaving the interception core toward the sensor.
    Relay(Release),
    RelayEcho { phone_echo: u8 },
    EchoReply { from: DeviceId, id: u8, status: u8 },
    HoldExpire(u64),
}

impl From<GapEvent> for SimEvent {
    fn from(e: GapEvent) -> Self {
        SimEvent::Gap(e)
    }
}

impl From<crate::radio::Delivery> for SimEvent {
    fn from(d: crate::radio::Delivery) -> Self {
        SimEvent::Gap(GapEvent::Deliver(d))
    }
}

/// One completed or failed pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingRecord {
    pub time_ms: TimeMs,
    pub central: DeviceId,
    pub peripheral: DeviceId,
    pub transcript: Option<PairingTranscript>,
    /// The session key both ends agreed on.
    pub key: Option<Key128>,
    pub error: Option<PairingError>,
}

#[derive(Debug, Clone)]
struct LinkState {
    central: DeviceId,
    pending_keys: Option<(Key128, Key128)>,
    /// Central's and peripheral's ends.
    ciphers: Option<(LinkCipher, LinkCipher)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CorePhase {
    Observing,
    Connecting,
    Pairing,
    Discovering,
    Relaying,
    Failed,
}

#[derive(Debug, Clone)]
struct Attacker {
    fake_address: Address,
    observed: Option<(Address, AdvertisingData)>,
    phase: CorePhase,
    session: Option<MitmSession>,
    fake: Option<FakePeripheral>,
    rules: Vec<ModificationRule>,
    manual_mode: bool,
    next_op_id: u64,
    next_echo_id: u8,
    echo_map: BTreeMap<u8, u8>,
    failure: Option<String>,
}

pub struct World {
    pub config: ScenarioConfig,
    pub medium: Medium,
    pub gap: Gap,
    queue: EventQueue<SimEvent>,
    pub sensor: PeripheralDevice,
    pub phone: CentralDevice,
    attacker: Attacker,
    links: BTreeMap<ConnectionId, LinkState>,
    pairing_rng: ChaCha8Rng,
    attacker_rng: ChaCha8Rng,
    pairings: Vec<PairingRecord>,
    outbox: Vec<ServerEvent>,
    last_rssi: BTreeMap<DeviceId, f64>,
    attack_connected_ms: Option<TimeMs>,
    evaluations_at_attack: Option<u64>,
    auth_failures: u64,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<World, ConfigError> {
        config.validate()?;
        let mut attacker_rng = rng_stream(config.seed, STREAM_ATTACKER);
        let known = [SENSOR_ADDRESS, PHONE_ADDRESS, CORE_ADDRESS];
        let fake_address = loop {
            let mut b = [0u8; 6];
            attacker_rng.fill_bytes(&mut b);
            let a = Address::random_static(b);
            if !known.contains(&a) {
                break a;
            }
        };

        let mut medium = Medium::new(config.seed);
        let mut gap = Gap::new();
        for (id, addr, role) in [
            (SENSOR, SENSOR_ADDRESS, GapRole::Peripheral),
            (PHONE, PHONE_ADDRESS, GapRole::Central),
            (CORE, CORE_ADDRESS, GapRole::Central),
            (FAKE, fake_address, GapRole::Peripheral),
        ] {
            medium.add_device(id, addr, role);
            gap.register(id, role);
        }
        let model = config.path_loss.rssi_model();
        let d = config.distances;
        for (a, b, distance) in [
            (SENSOR, PHONE, d.sensor_to_phone),
            (CORE, SENSOR, d.attacker_to_sensor),
            (FAKE, PHONE, d.attacker_to_phone),
        ] {
            medium
                .add_link(RadioLink {
                    endpoint_a: a,
                    endpoint_b: b,
                    distance,
                    model: model.clone(),
                    one_way_latency_ms: config.latency.one_way_ms,
                })
                .map_err(|e| ConfigError {
                    field: "distances".into(),
                    message: e.to_string(),
                })?;
        }

        let sensor = PeripheralDevice::new(
            SENSOR,
            SENSOR_ADDRESS,
            PeripheralSettings {
                io: config.responder_io,
                notify_interval_ms: config.notify_interval_ms,
                adv_interval_ms: config.adv_interval_ms,
                supports_echo: config.supports_echo,
            },
            config.heart_rate,
        )
        .map_err(|e| ConfigError {
            field: "heart_rate".into(),
            message: e.to_string(),
        })?;
        let mut phone = CentralDevice::new(
            PHONE,
            PHONE_ADDRESS,
            config.initiator_io,
            config.detector,
            config.rtt_probe.map(|p| p.interval_ms),
        );
        phone.rssi_monitor_enabled = config.rssi_monitor;

        let mut world = World {
            medium,
            gap,
            queue: EventQueue::new(),
            sensor,
            phone,
            attacker: Attacker {
                fake_address,
                observed: None,
                phase: CorePhase::Observing,
                session: None,
                fake: None,
                rules: config.mitm.rules.clone(),
                manual_mode: config.mitm.manual_mode,
                next_op_id: 0,
                next_echo_id: 0,
                echo_map: BTreeMap::new(),
                failure: None,
            },
            links: BTreeMap::new(),
            pairing_rng: rng_stream(config.seed, STREAM_PAIRING),
            attacker_rng,
            pairings: Vec::new(),
            outbox: Vec::new(),
            last_rssi: BTreeMap::new(),
            attack_connected_ms: None,
            evaluations_at_attack: None,
            auth_failures: 0,
            config,
        };
        world.boot();
        Ok(world)
    }

    fn boot(&mut self) {
        let adv = self.sensor.adv.clone();
        self.gap
            .start_advertising(&mut self.queue, SENSOR, self.config.adv_interval_ms, &adv)
            .expect("sensor is a peripheral");
        self.gap
            .start_scan(&mut self.queue, CORE, ScanFilter::default(), None, false)
            .expect("core is a central");
        self.queue.schedule_at(0, SimEvent::PhoneScan);
        self.queue
            .schedule_at(self.config.notify_interval_ms, SimEvent::NotifyTick);
        if let Some(p) = self.config.rtt_probe {
            self.queue.schedule_at(p.interval_ms, SimEvent::RttProbe);
        }
        if self.config.mitm.enabled {
            self.queue.schedule_at(self.config.mitm.start_ms, SimEvent::MitmStart);
        }
    }

    pub fn now(&self) -> TimeMs {
        self.queue.now()
    }

    pub fn next_event_time(&self) -> Option<TimeMs> {
        self.queue.peek_time()
    }

    /// Processes every event up to and including `until`.
    pub fn run_until(&mut self, until: TimeMs) {
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            let (now, ev) = self.queue.pop().expect("peeked");
            self.handle(now, ev);
        }
        if until > self.queue.now() {
            self.queue.advance_to(until);
        }
    }

    /// Runs to the configured duration.
    pub fn run(&mut self) {
        self.run_until(self.config.duration_ms);
    }

    pub fn session(&self) -> Option<&MitmSession> {
        self.attacker.session.as_ref()
    }

    pub fn fake_address(&self) -> Address {
        self.attacker.fake_address
    }

    pub fn attacker_failure(&self) -> Option<&str> {
        self.attacker.failure.as_deref()
    }

    pub fn pairings(&self) -> &[PairingRecord] {
        &self.pairings
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.phone.alerts
    }

    /// When the phone connected to the proxy face.
    pub fn attack_connected_ms(&self) -> Option<TimeMs> {
        self.attack_connected_ms
    }

    /// RSSI windows the phone had tested before connecting to the proxy.
    pub fn evaluations_before_attack(&self) -> u64 {
        self.evaluations_at_attack
            .unwrap_or_else(|| self.phone.rssi_detector().evaluations())
    }

    /// Data frames that failed link-layer authentication.
    pub fn auth_failures(&self) -> u64 {
        self.auth_failures
    }

    pub fn drain_outbox(&mut self) -> Vec<ServerEvent> {
        std::mem::take(&mut self.outbox)
    }

    pub fn outbox(&self) -> &[ServerEvent] {
        &self.outbox
    }

    pub fn write_journal<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        match &self.attacker.session {
            Some(s) => s.write_journal(out),
            None => Ok(()),
        }
    }

    fn handle(&mut self, now: TimeMs, ev: SimEvent) {
        match ev {
            SimEvent::Gap(g) => {
                if let GapEvent::Deliver(d) = &g {
                    self.last_rssi.insert(d.frame.sender, d.rssi_dbm);
                }
                let notices = self
                    .gap
                    .handle(&mut self.medium, &mut self.queue, now, g)
                    .expect("gap frames are well formed");
                for n in notices {
                    self.on_notice(now, n);
                }
            }
            SimEvent::NotifyTick => {
                if let Some(op) = self.sensor.tick(now) {
                    self.send_att(now, SENSOR, &AttPdu::Op(op));
                }
                self.queue
                    .schedule_at(now + self.config.notify_interval_ms, SimEvent::NotifyTick);
            }
            SimEvent::RttProbe => {
                if self.phone.wants_rtt_probe() {
                    let id = self.phone.next_echo_id();
                    let _ = self
                        .gap
                        .send_echo_request(&mut self.medium, &mut self.queue, PHONE, id, now);
                }
                if self.phone.rtt_detector().is_active() {
                    let interval = self.config.rtt_probe.map_or(1000, |p| p.interval_ms);
                    self.queue.schedule_at(now + interval, SimEvent::RttProbe);
                }
            }
            SimEvent::MitmStart => {
                if let Err(message) = self.start_mitm(now, SENSOR_ADDRESS) {
                    self.outbox.push(ServerEvent::Error {
                        command: None,
                        message,
                    });
                }
            }
            SimEvent::PhoneScan => {
                if self.phone.peer.is_none() && self.phone.phase != CentralPhase::Failed {
                    self.phone.phase = CentralPhase::Scanning;
                    let filter = ScanFilter {
                        name: Some(self.phone.target_name.clone()),
                        address: None,
                    };
                    self.gap
                        .start_scan(
                            &mut self.queue,
                            PHONE,
                            filter,
                            Some(self.config.scan_timeout_ms),
                            true,
                        )
                        .expect("phone is a central");
                }
            }
            SimEvent::Relay(r) => {
                self.send_att(now, CORE, &AttPdu::Op(r.op));
            }
            SimEvent::RelayEcho { phone_echo } => {
                self.attacker.next_echo_id = self.attacker.next_echo_id.wrapping_add(1);
                let id = self.attacker.next_echo_id;
                if self
                    .gap
                    .send_echo_request(&mut self.medium, &mut self.queue, CORE, id, now)
                    .is_ok()
                {
                    self.attacker.echo_map.insert(id, phone_echo);
                }
            }
            SimEvent::EchoReply { from, id, status } => {
                let _ = self.gap.send_echo_response(
                    &mut self.medium,
                    &mut self.queue,
                    from,
                    id,
                    status,
                    now,
                );
            }
            SimEvent::HoldExpire(id) => {
                let released = self
                    .attacker
                    .session
                    .as_mut()
                    .and_then(|s| s.expire(id, now));
                if let Some(r) = released {
                    self.emit_op(id, None);
                    self.release(now, r);
                }
            }
        }
    }

    fn on_notice(&mut self, now: TimeMs, n: GapNotice) {
        match n {
            GapNotice::AdvSeen {
                scanner: CORE,
                address,
                adv,
                ..
            } => {
                if address == SENSOR_ADDRESS {
                    self.attacker.observed = Some((address, adv.clone()));
                }
                if let Some(s) = self.attacker.session.as_mut() {
                    s.observe_advertisement(address, &adv);
                }
            }
            GapNotice::AdvSeen { .. } => {}
            GapNotice::Connected {
                conn,
                central,
                peripheral,
            } => {
                self.links.insert(
                    conn,
                    LinkState {
                        central,
                        pending_keys: None,
                        ciphers: None,
                    },
                );
                match peripheral {
                    SENSOR => self.sensor.connect(central),
                    FAKE => {}
                    _ => unreachable!("only the sensor and the fake accept connections"),
                }
                if central == PHONE {
                    self.phone.peer = Some(peripheral);
                    self.phone.peer_address = self.medium.address(peripheral);
                    self.phone.phase = CentralPhase::Pairing;
                    if peripheral == FAKE {
                        self.attack_connected_ms = Some(now);
                        self.evaluations_at_attack = Some(self.phone.rssi_detector().evaluations());
                    }
                } else {
                    self.attacker.phase = CorePhase::Pairing;
                }
                self.begin_pairing(now, conn, central, peripheral);
            }
            GapNotice::ConnectFailed { central, .. } => {
                if central == PHONE {
                    self.phone.phase = CentralPhase::Idle;
                    self.queue
                        .schedule_in(self.config.reconnect_delay_ms, SimEvent::PhoneScan);
                } else {
                    self.core_failed("connection refused by the target");
                }
            }
            GapNotice::ScanTimeout { device } => {
                if device == PHONE {
                    self.phone.fail("Timeout: no matching advertiser");
                } else if device == CORE {
                    self.core_failed("Timeout: target stopped advertising");
                }
            }
            GapNotice::Data {
                conn,
                from,
                to,
                payload,
                rssi_dbm,
            } => self.on_data(now, conn, from, to, &payload, rssi_dbm),
            GapNotice::EchoRequest { to, id, .. } => self.on_echo_request(now, to, id),
            GapNotice::EchoResponse {
                to, id, status, rtt_ms, ..
            } => match to {
                CORE => {
                    if let Some(phone_id) = self.attacker.echo_map.remove(&id) {
                        let _ = self.gap.send_echo_response(
                            &mut self.medium,
                            &mut self.queue,
                            FAKE,
                            phone_id,
                            status,
                            now,
                        );
                    }
                }
                PHONE => {
                    if let Some(rtt) = rtt_ms {
                        match self.phone.on_echo(now, status, rtt as f64) {
                            Ok(Some(a)) => self.emit_alert(a),
                            Ok(None) => {}
                            Err(e) => self.outbox.push(ServerEvent::Error {
                                command: None,
                                message: format!("rtt probe: {e}"),
                            }),
                        }
                    }
                }
                _ => {}
            },
        }
    }

    fn on_echo_request(&mut self, now: TimeMs, to: DeviceId, id: u8) {
        match to {
            SENSOR => {
                let status = self.sensor.echo_status();
                let delay = self.config.latency.echo_processing_ms;
                if delay == 0 {
                    let _ = self.gap.send_echo_response(
                        &mut self.medium,
                        &mut self.queue,
                        SENSOR,
                        id,
                        status,
                        now,
                    );
                } else {
                    self.queue.schedule_in(
                        delay,
                        SimEvent::EchoReply {
                            from: SENSOR,
                            id,
                            status,
                        },
                    );
                }
            }
            FAKE => {
                if self.attacker.phase == CorePhase::Relaying {
                    self.queue.schedule_in(
                        self.config.latency.proxy_processing_ms,
                        SimEvent::RelayEcho { phone_echo: id },
                    );
                } else {
                    let _ = self.gap.send_echo_response(
                        &mut self.medium,
                        &mut self.queue,
                        FAKE,
                        id,
                        ECHO_REJECTED,
                        now,
                    );
                }
            }
            _ => {}
        }
    }

    fn begin_pairing(&mut self, now: TimeMs, conn: ConnectionId, central: DeviceId, peripheral: DeviceId) {
        let cfg = &self.config;
        let features = PairingFeatures {
            initiator_io: cfg.initiator_io,
            responder_io: cfg.responder_io,
            oob: cfg.oob_available,
        };
        let method = select_association(features.initiator_io, features.responder_io, features.oob);
        let result = if central == CORE && method.authenticated() {
            // The attacker sees neither the passkey nor the OOB data, so it
            // can only guess.
            match method {
                crate::pairing::AssociationMethod::Passkey => {
                    let shown = self.pairing_rng.random_range(0..=MAX_PASSKEY);
                    let guess = self.attacker_rng.random_range(0..=MAX_PASSKEY);
                    run_pairing(
                        PartyInput { passkey: Some(guess) },
                        PartyInput { passkey: Some(shown) },
                        features,
                        cfg.pairing_mode,
                        method,
                        &mut self.pairing_rng,
                    )
                }
                _ => Err(PairingError::ConfirmMismatch),
            }
        } else {
            run_pairing(
                PartyInput {
                    passkey: cfg.passkey,
                },
                PartyInput { passkey: None },
                features,
                cfg.pairing_mode,
                method,
                &mut self.pairing_rng,
            )
        };
        match result {
            Ok(outcome) => {
                let keys = (outcome.initiator.session_key(), outcome.responder.session_key());
                self.pairings.push(PairingRecord {
                    time_ms: now,
                    central,
                    peripheral,
                    transcript: Some(outcome.transcript.clone()),
                    key: Some(keys.0),
                    error: None,
                });
                self.links.get_mut(&conn).expect("link exists").pending_keys = Some(keys);
                let step = self.config.latency.one_way_ms;
                for (i, (from_initiator, pdu)) in outcome.pdus.iter().enumerate() {
                    let sender = if *from_initiator { central } else { peripheral };
                    let payload = with_channel(CHANNEL_SMP, &pdu.encode());
                    let _ = self.gap.send_data(
                        &mut self.medium,
                        &mut self.queue,
                        sender,
                        payload,
                        now + step * i as TimeMs,
                    );
                }
            }
            Err(e) => {
                self.pairings.push(PairingRecord {
                    time_ms: now,
                    central,
                    peripheral,
                    transcript: None,
                    key: None,
                    error: Some(e.clone()),
                });
                if central == PHONE {
                    self.phone.fail(format!("pairing failed: {e}"));
                } else {
                    self.core_failed(&format!("pairing failed: {e}"));
                }
                self.drop_connection(now, conn);
            }
        }
    }

    fn core_failed(&mut self, reason: &str) {
        self.attacker.phase = CorePhase::Failed;
        self.attacker.failure = Some(reason.to_string());
        self.outbox.push(ServerEvent::Error {
            command: None,
            message: format!("interception core: {reason}"),
        });
    }

    fn drop_connection(&mut self, now: TimeMs, conn: ConnectionId) {
        let Some(c) = self.gap.disconnect(conn) else {
            return;
        };
        self.links.remove(&conn);
        for d in [c.central, c.peripheral] {
            match d {
                SENSOR => {
                    self.sensor.disconnect();
                    let adv = self.sensor.adv.clone();
                    self.gap
                        .start_advertising(&mut self.queue, SENSOR, self.config.adv_interval_ms, &adv)
                        .expect("sensor is a peripheral");
                }
                PHONE => {
                    self.phone.disconnect();
                    if self.phone.phase != CentralPhase::Failed {
                        self.queue
                            .schedule_at(now + self.config.reconnect_delay_ms, SimEvent::PhoneScan);
                    }
                }
                CORE => {
                    if self.attacker.phase != CorePhase::Failed {
                        self.attacker.phase = CorePhase::Observing;
                    }
                    self.attacker.echo_map.clear();
                }
                _ => {}
            }
        }
    }

    fn link_direction(&self, conn: ConnectionId, sender: DeviceId) -> LinkDirection {
        if self.links.get(&conn).is_some_and(|l| l.central == sender) {
            LinkDirection::CentralToPeripheral
        } else {
            LinkDirection::PeripheralToCentral
        }
    }

    /// Encrypts once the link is paired; the channel tag stays in clear.
    fn send_att(&mut self, now: TimeMs, from: DeviceId, pdu: &AttPdu) -> bool {
        let Some(conn) = self.gap.connection_of(from) else {
            return false;
        };
        let dir = self.link_direction(conn, from);
        let link = self.links.get_mut(&conn).expect("link exists");
        let plain = pdu.encode();
        let body = match link.ciphers.as_mut() {
            Some((c, p)) => {
                let cipher = if from == link.central { c } else { p };
                cipher.seal(dir, &plain).1
            }
            None => plain,
        };
        self.gap
            .send_data(
                &mut self.medium,
                &mut self.queue,
                from,
                with_channel(CHANNEL_ATT, &body),
                now,
            )
            .is_ok()
    }

    fn on_data(&mut self, now: TimeMs, conn: ConnectionId, from: DeviceId, to: DeviceId, payload: &[u8], rssi: f64) {
        let Some((tag, body)) = split_channel(payload) else {
            return;
        };
        match tag {
            CHANNEL_SMP => self.on_smp(now, conn, from, to, body),
            CHANNEL_ATT => {
                let dir = self.link_direction(conn, from);
                let Some(link) = self.links.get_mut(&conn) else {
                    return;
                };
                let plain = match link.ciphers.as_mut() {
                    Some((c, p)) => {
                        let cipher = if to == link.central { c } else { p };
                        match cipher.open_next(dir, body) {
                            Ok(pt) => pt,
                            Err(_) => {
                                self.auth_failures += 1;
                                return;
                            }
                        }
                    }
                    None => body.to_vec(),
                };
                let Ok(pdu) = AttPdu::decode(&plain) else {
                    return;
                };
                match to {
                    SENSOR => {
                        if let Some(rsp) = self.sensor.handle_att(&pdu) {
                            self.send_att(now, SENSOR, &rsp);
                        }
                    }
                    PHONE => self.phone_att(now, pdu, rssi),
                    CORE => self.core_att(now, pdu),
                    FAKE => self.fake_att(now, pdu),
                    _ => {}
                }
            }
            _ => {}
        }
    }

    /// The responder's random is the last pairing PDU; the central switches
    /// encryption on and starts discovery.
    fn on_smp(&mut self, now: TimeMs, conn: ConnectionId, _from: DeviceId, to: DeviceId, body: &[u8]) {
        let Ok(pdu) = SmpPdu::decode(body) else {
            return;
        };
        let Some(link) = self.links.get_mut(&conn) else {
            return;
        };
        if !(matches!(pdu, SmpPdu::Random(_)) && to == link.central) {
            return;
        }
        let Some((ki, kr)) = link.pending_keys.take() else {
            return;
        };
        link.ciphers = Some((LinkCipher::new(ki), LinkCipher::new(kr)));
        match to {
            PHONE => {
                self.phone.phase = CentralPhase::Discovering;
                let op_id = self.phone.next_op_id();
                self.send_att(now, PHONE, &AttPdu::DiscoverReq { op_id });
            }
            CORE => {
                self.attacker.phase = CorePhase::Discovering;
                self.attacker.next_op_id += 1;
                let op_id = self.attacker.next_op_id | crate::mitm::PROXY_OP_ID_BIT;
                self.send_att(now, CORE, &AttPdu::DiscoverReq { op_id });
            }
            _ => {}
        }
    }

    fn phone_att(&mut self, now: TimeMs, pdu: AttPdu, rssi: f64) {
        match pdu {
            AttPdu::DiscoverRsp { layout, .. } if self.phone.phase == CentralPhase::Discovering => {
                let has_hr = AttributeDatabase::decode_layout(&layout)
                    .is_ok_and(|db| db.contains_service(HEART_RATE_SERVICE));
                if !has_hr {
                    self.phone.fail("peer has no heart-rate service");
                    return;
                }
                self.phone.phase = CentralPhase::Subscribing;
                let op_id = self.phone.next_op_id();
                let sub = GattOp::new(OpKind::Subscribe, HEART_RATE_MEASUREMENT, vec![], op_id);
                if self.send_att(now, PHONE, &AttPdu::Op(sub)) {
                    self.phone.subscriptions.insert(HEART_RATE_MEASUREMENT);
                    self.phone.phase = CentralPhase::Ready;
                }
            }
            AttPdu::Op(op) if op.kind == OpKind::Notify => {
                let before = self.phone.received.len();
                let alert = self.phone.on_notification(now, &op, rssi);
                if let Some(r) = self.phone.received.get(before) {
                    self.outbox.push(ServerEvent::Hr {
                        time_ms: r.time_ms,
                        bpm: r.bpm,
                        from: r.from,
                    });
                    if self.phone.rssi_monitor_enabled {
                        self.outbox.push(ServerEvent::Rssi {
                            time_ms: now,
                            dbm: rssi,
                        });
                    }
                }
                if let Some(a) = alert {
                    self.emit_alert(a);
                }
            }
            _ => {}
        }
    }

    fn core_att(&mut self, now: TimeMs, pdu: AttPdu) {
        match pdu {
            AttPdu::DiscoverRsp { layout, .. } if self.attacker.phase == CorePhase::Discovering => {
                let Ok(db) = AttributeDatabase::decode_layout(&layout) else {
                    self.core_failed("unreadable target database");
                    return;
                };
                let victim_connected = self.phone.peer == Some(SENSOR);
                let Some(session) = self.attacker.session.as_mut() else {
                    return;
                };
                let started = session
                    .clone_target(&db)
                    .and_then(|fake| session.start_session(victim_connected).map(|_| fake));
                match started {
                    Ok(fake) => {
                        self.gap
                            .start_advertising(
                                &mut self.queue,
                                FAKE,
                                self.config.fake_adv_interval_ms,
                                &fake.adv,
                            )
                            .expect("fake is a peripheral");
                        self.attacker.fake = Some(fake);
                        self.attacker.phase = CorePhase::Relaying;
                        self.emit_session(now);
                    }
                    Err(e) => self.core_failed(&e.to_string()),
                }
            }
            AttPdu::Op(op) => self.intercept(now, Direction::ToCentral, op),
            err @ AttPdu::Error { .. } => {
                self.send_att(now, FAKE, &err);
            }
            _ => {}
        }
    }

    fn fake_att(&mut self, now: TimeMs, pdu: AttPdu) {
        match pdu {
            AttPdu::DiscoverReq { op_id } => {
                let Some(fake) = &self.attacker.fake else {
                    return;
                };
                let rsp = AttPdu::DiscoverRsp {
                    op_id,
                    layout: fake.db.encode_layout(),
                };
                self.send_att(now, FAKE, &rsp);
            }
            AttPdu::Op(op) => self.intercept(now, Direction::ToPeripheral, op),
            _ => {}
        }
    }

    fn intercept(&mut self, now: TimeMs, direction: Direction, op: GattOp) {
        let Some(session) = self.attacker.session.as_mut() else {
            return;
        };
        match session.forward(now, direction, op) {
            Ok(ForwardOutcome::Send(r)) => {
                self.emit_op(r.journal_id, None);
                self.release(now, r);
            }
            Ok(ForwardOutcome::Held {
                journal_id,
                deadline_ms,
            }) => {
                self.emit_op(journal_id, Some(deadline_ms));
                self.queue
                    .schedule_at(deadline_ms, SimEvent::HoldExpire(journal_id));
            }
            Err(e) => self.outbox.push(ServerEvent::Error {
                command: None,
                message: e.to_string(),
            }),
        }
    }

    /// Sends a released op on its way. Relays toward the sensor pay the
    /// proxy processing delay.
    fn release(&mut self, now: TimeMs, r: Release) {
        match r.direction {
            Direction::ToCentral => {
                self.send_att(now, FAKE, &AttPdu::Op(r.op));
            }
            Direction::ToPeripheral => {
                self.queue
                    .schedule_in(self.config.latency.proxy_processing_ms, SimEvent::Relay(r));
            }
        }
    }

    fn emit_op(&mut self, journal_id: u64, deadline_ms: Option<TimeMs>) {
        let Some(e) = self.attacker.session.as_ref().and_then(|s| s.entry(journal_id)) else {
            return;
        };
        self.outbox.push(ServerEvent::Op {
            op_id: e.op_id,
            time_ms: e.time_ms,
            direction: e.direction,
            uuid: e.uuid,
            before_hex: e.before_hex.clone(),
            after_hex: e.after_hex.clone(),
            held: deadline_ms.is_some(),
            decision: e.decision,
            deadline_ms,
        });
    }

    fn emit_alert(&mut self, a: Alert) {
        self.outbox.push(ServerEvent::Alert {
            kind: a.kind,
            time_ms: a.time_ms,
            score: a.score,
        });
    }

    fn emit_session(&mut self, now: TimeMs) {
        if let Some(s) = &self.attacker.session {
            self.outbox.push(ServerEvent::Session {
                state: s.state,
                target: s.target,
                fake_address: s.fake_address,
                time_ms: now,
            });
        }
    }

    /// Starts the takeover: the victim's link drops, the interception core
    /// connects to the target and clones it, and the proxy face advertises
    /// until the phone reconnects to it.
    fn start_mitm(&mut self, now: TimeMs, target: Address) -> Result<(), String> {
        if self.attacker.session.is_some() {
            return Err("a session was already started in this run".into());
        }
        if target != SENSOR_ADDRESS {
            return Err(format!("{target} is not a connectable peripheral"));
        }
        let Some((_, adv)) = self.attacker.observed.clone() else {
            return Err(MitmError::TargetNotObserved.to_string());
        };
        let mut session = MitmSession::new(
            target,
            self.attacker.fake_address,
            &[SENSOR_ADDRESS, PHONE_ADDRESS, CORE_ADDRESS],
        )
        .map_err(|e| e.to_string())?;
        session
            .set_rules(self.attacker.rules.clone())
            .map_err(|e| e.to_string())?;
        session.manual_mode = self.attacker.manual_mode;
        session.hold_timeout_ms = self.config.mitm.hold_timeout_ms;
        session.attacker_distance_to_central = self.config.distances.attacker_to_phone;
        session.observe_advertisement(target, &adv);
        self.attacker.session = Some(session);
        self.emit_session(now);

        if let Some(conn) = self.gap.connection_of(PHONE) {
            self.drop_connection(now, conn);
        } else if self.gap.is_scanning(PHONE) {
            self.gap.stop_scan(PHONE);
            self.phone.phase = CentralPhase::Idle;
            self.queue
                .schedule_at(now + self.config.reconnect_delay_ms, SimEvent::PhoneScan);
        }
        self.gap.stop_scan(CORE);
        self.attacker.phase = CorePhase::Connecting;
        self.gap
            .start_scan(
                &mut self.queue,
                CORE,
                ScanFilter {
                    name: None,
                    address: Some(target),
                },
                Some(self.config.scan_timeout_ms),
                true,
            )
            .expect("core is a central");
        Ok(())
    }

    fn stop_mitm(&mut self, now: TimeMs) -> Result<(), String> {
        let Some(session) = self.attacker.session.as_mut() else {
            return Err("no session".into());
        };
        if session.state == SessionState::Stopped {
            return Err("session already stopped".into());
        }
        let held: Vec<u64> = session.held_ids().collect();
        session.stop_session();
        for id in held {
            self.emit_op(id, None);
        }
        self.gap.stop_advertising(FAKE);
        self.gap.stop_scan(CORE);
        for dev in [FAKE, CORE] {
            if let Some(conn) = self.gap.connection_of(dev) {
                self.drop_connection(now, conn);
            }
        }
        if self.attacker.phase != CorePhase::Failed {
            self.attacker.phase = CorePhase::Observing;
        }
        self.gap
            .start_scan(&mut self.queue, CORE, ScanFilter::default(), None, false)
            .expect("core is a central");
        self.emit_session(now);
        Ok(())
    }

    /// Applies one control command at the current virtual time. The ack or
    /// error, and any resulting events, go to the outbox.
    pub fn apply(&mut self, cmd: Command) -> Result<(), String> {
        let now = self.now();
        let name = cmd.name();
        let result = self.apply_inner(now, cmd);
        self.outbox.push(match &result {
            Ok(()) => ServerEvent::Ack {
                command: name.into(),
            },
            Err(message) => ServerEvent::Error {
                command: Some(name.into()),
                message: message.clone(),
            },
        });
        result
    }

    fn apply_inner(&mut self, now: TimeMs, cmd: Command) -> Result<(), String> {
        match cmd {
            Command::ListDevices {} => {
                let roster = self.roster();
                self.outbox.extend(roster);
                Ok(())
            }
            Command::StartMitm { target } => {
                let addr = if target == SENSOR_NAME {
                    SENSOR_ADDRESS
                } else {
                    target.parse::<Address>()?
                };
                self.start_mitm(now, addr)
            }
            Command::StopMitm {} => self.stop_mitm(now),
            Command::SetRules { rules } => {
                for (i, r) in rules.iter().enumerate() {
                    r.validate().map_err(|e| format!("rules[{i}]: {e}"))?;
                }
                if let Some(s) = self.attacker.session.as_mut() {
                    s.set_rules(rules.clone()).map_err(|e| e.to_string())?;
                }
                self.attacker.rules = rules;
                Ok(())
            }
            Command::SetManual { on } => {
                self.attacker.manual_mode = on;
                if let Some(s) = self.attacker.session.as_mut() {
                    s.manual_mode = on;
                }
                Ok(())
            }
            Command::Decision {
                op_id,
                action,
                bytes_hex,
            } => {
                let action = match action {
                    Action::Forward => OperatorAction::Forward,
                    Action::Drop => OperatorAction::Drop,
                    Action::Modify => {
                        let hex_text = bytes_hex.ok_or("modify needs bytes_hex")?;
                        let bytes = hex::decode(hex_text.trim()).map_err(|e| format!("bytes_hex: {e}"))?;
                        OperatorAction::Modify(bytes)
                    }
                };
                let session = self.attacker.session.as_mut().ok_or("no session")?;
                let released = session.decide(op_id, action).map_err(|e| e.to_string())?;
                self.emit_op(op_id, None);
                if let Some(r) = released {
                    self.release(now, r);
                }
                Ok(())
            }
            Command::Replay { op_id } => {
                let session = self.attacker.session.as_mut().ok_or("no session")?;
                let r = session.replay(now, op_id).map_err(|e| e.to_string())?;
                self.emit_op(r.journal_id, None);
                self.release(now, r);
                Ok(())
            }
        }
    }

    /// Device entries for every radio, the proxy face included.
    pub fn roster(&self) -> Vec<ServerEvent> {
        let fake_name = self
            .attacker
            .fake
            .as_ref()
            .map_or_else(|| format!("{SENSOR_NAME} (proxy)"), |f| f.adv.name.clone());
        [
            (SENSOR, SENSOR_NAME.to_string(), false),
            (PHONE, "Fitness app".to_string(), false),
            (CORE, "Interception core".to_string(), false),
            (FAKE, fake_name, true),
        ]
        .into_iter()
        .map(|(id, name, is_fake)| ServerEvent::Device {
            id,
            name,
            address: self.medium.address(id).expect("registered"),
            role: self.medium.role(id).expect("registered"),
            is_fake,
            rssi: self.last_rssi.get(&id).copied(),
            connected_to: self
                .gap
                .peer_of(id)
                .and_then(|p| self.medium.address(p)),
        })
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::AlertKind;

    fn world(cfg: ScenarioConfig) -> World {
        World::new(cfg).unwrap()
    }

    #[test]
    fn clean_run_connects_and_streams() {
        let mut w = world(ScenarioConfig {
            duration_ms: 10_000,
            ..ScenarioConfig::default()
        });
        w.run();
        assert_eq!(w.phone.phase, CentralPhase::Ready);
        assert_eq!(w.phone.peer_address, Some(SENSOR_ADDRESS));
        assert_eq!(w.sensor.peer, Some(PHONE));
        // The notify sent at 10 s is still in flight when the run ends.
        let bpm: Vec<u16> = w.phone.received.iter().map(|r| r.bpm).collect();
        let landed = w.sensor.emitted.iter().filter(|e| e.time_ms + 5 <= 10_000).count();
        assert_eq!(bpm.len(), landed);
        assert!(bpm.len() >= 9);
        assert!(bpm.iter().all(|b| *b == 70));
        assert_eq!(w.pairings().len(), 1);
        assert!(w.session().is_none());
        assert_eq!(w.auth_failures(), 0);
    }

    #[test]
    fn target_absent_times_out() {
        let mut w = world(ScenarioConfig {
            duration_ms: 20_000,
            scan_timeout_ms: 3000,
            ..ScenarioConfig::default()
        });
        w.gap.stop_advertising(SENSOR);
        w.run();
        assert_eq!(w.phone.phase, CentralPhase::Failed);
        assert!(w.phone.failure.as_deref().unwrap().starts_with("Timeout"));
    }

    #[test]
    fn mitm_takeover_topology() {
        let mut w = world(ScenarioConfig {
            duration_ms: 70_000,
            ..ScenarioConfig::paper_attack()
        });
        w.run();
        let s = w.session().unwrap();
        assert_eq!(s.state, SessionState::Active);
        assert_eq!(w.phone.peer_address, Some(w.fake_address()));
        assert_eq!(w.sensor.peer, Some(CORE));
        assert_ne!(w.fake_address(), SENSOR_ADDRESS);
        let t = w.attack_connected_ms().unwrap();
        assert!(t > 60_000 && t < 62_000, "{t}");
        assert_eq!(w.pairings().len(), 3);
        let after: Vec<u16> = w
            .phone
            .received
            .iter()
            .filter(|r| r.time_ms > t)
            .map(|r| r.bpm)
            .collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|b| *b == 255));
        assert!(w.sensor.emitted.iter().all(|e| e.bpm == 70));
    }

    #[test]
    fn roster_and_commands() {
        let mut w = world(ScenarioConfig {
            duration_ms: 5000,
            ..ScenarioConfig::default()
        });
        w.run_until(3000);
        w.apply(Command::ListDevices {}).unwrap();
        let out = w.drain_outbox();
        let devices: Vec<(Address, bool)> = out
            .iter()
            .filter_map(|e| match e {
                ServerEvent::Device { address, is_fake, .. } => Some((*address, *is_fake)),
                _ => None,
            })
            .collect();
        assert_eq!(devices.len(), 4);
        assert!(devices.contains(&(SENSOR_ADDRESS, false)));
        assert!(devices.contains(&(w.fake_address(), true)));
        assert!(matches!(out.last(), Some(ServerEvent::Ack { .. })));

        assert!(w.apply(Command::Replay { op_id: 1 }).is_err());
        assert!(w
            .apply(Command::StartMitm {
                target: "00:00:00:00:00:09".into()
            })
            .is_err());
        w.apply(Command::StartMitm {
            target: SENSOR_NAME.into(),
        })
        .unwrap();
        assert!(w
            .apply(Command::StartMitm {
                target: SENSOR_NAME.into()
            })
            .is_err());
        w.run_until(5000);
        assert_eq!(w.session().unwrap().state, SessionState::Active);
        w.apply(Command::StopMitm {}).unwrap();
        assert_eq!(w.session().unwrap().state, SessionState::Stopped);
        assert!(w.gap.connection_of(FAKE).is_none());
        assert!(w.gap.connection_of(CORE).is_none());
    }

    #[test]
    fn passkey_defeats_the_core() {
        let mut w = world(ScenarioConfig {
            responder_io: crate::pairing::IoCapability::DisplayOnly,
            duration_ms: 70_000,
            ..ScenarioConfig::paper_attack()
        });
        w.run();
        assert!(w.attacker_failure().unwrap().contains("pairing failed"));
        assert_ne!(w.session().unwrap().state, SessionState::Active);
        // The victim reconnects to the genuine sensor.
        assert_eq!(w.phone.peer, Some(SENSOR));
        assert!(w.phone.received.iter().all(|r| r.bpm == 70));
        assert!(w.alerts().iter().all(|a| a.kind != AlertKind::RttInflation));
    }
}
