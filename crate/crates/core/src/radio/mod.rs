//! Virtual radio: devices, links, frames and the shared medium that
//! timestamps, samples RSSI for, logs and schedules every frame.
//!
//! Frequency hopping is abstracted to a single logical data channel (logged
//! as channel 0). Advertising uses channels 37, 38 and 39.

mod gap;
mod path_loss;
mod queue;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gatt::Uuid;

pub use path_loss::{
    expected_rssi, sample_gaussian, EmpiricalRow, EmpiricalTable, PathLossParams, RssiModel, D_MIN,
};
pub use gap::{ConnectionId, Gap, GapConnection, GapEvent, GapNotice, ScanFilter};
pub use queue::{EventQueue, TimeMs};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadioError {
    #[error("distance {0} m is below the 0.1 m model minimum")]
    DistanceTooSmall(f64),
    #[error("no empirical RSSI row for {0} m")]
    NoEmpiricalRow(f64),
    #[error("invalid path-loss parameters: {0}")]
    InvalidParams(&'static str),
    #[error("device {device} with role {role:?} may not send {kind:?}")]
    RoleViolation {
        device: DeviceId,
        role: GapRole,
        kind: FrameKind,
    },
    #[error("{kind:?} cannot use channel {channel}")]
    InvalidChannel { kind: FrameKind, channel: u8 },
    #[error("no radio link between {0} and {1}")]
    NoLink(DeviceId, DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("one-way latency must be positive")]
    InvalidLatency,
    #[error("no advertisement from the target within the scan window")]
    Timeout,
    #[error("not connected")]
    NotConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// 48-bit device address, most significant byte first in text form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 6]);

impl Address {
    /// Random static address: top two bits of the most significant byte set.
    pub fn random_static(mut bytes: [u8; 6]) -> Address {
        bytes[0] |= 0xc0;
        Address(bytes)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for Address {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(format!("invalid address {s:?}"));
        }
        let mut out = [0u8; 6];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = u8::from_str_radix(p, 16).map_err(|_| format!("invalid address {s:?}"))?;
        }
        Ok(Address(out))
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// GAP roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GapRole {
    /// Sends advertising events only.
    Broadcaster,
    /// Receives advertising events only.
    Observer,
    /// Accepts connections.
    Peripheral,
    /// Initiates connections.
    Central,
}

impl GapRole {
    pub fn can_advertise(self) -> bool {
        matches!(self, GapRole::Broadcaster | GapRole::Peripheral)
    }

    pub fn can_scan(self) -> bool {
        matches!(self, GapRole::Observer | GapRole::Central)
    }
}

/// Gate for starting advertising.
pub fn check_can_advertise(device: DeviceId, role: GapRole) -> Result<(), RadioError> {
    if role.can_advertise() {
        Ok(())
    } else {
        Err(RadioError::RoleViolation {
            device,
            role,
            kind: FrameKind::AdvInd,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Adv37,
    Adv38,
    Adv39,
    /// The single logical data channel.
    Data,
}

impl Channel {
    pub const ADVERTISING: [Channel; 3] = [Channel::Adv37, Channel::Adv38, Channel::Adv39];

    pub fn number(self) -> u8 {
        match self {
            Channel::Adv37 => 37,
            Channel::Adv38 => 38,
            Channel::Adv39 => 39,
            Channel::Data => 0,
        }
    }

    pub fn is_advertising(self) -> bool {
        self != Channel::Data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    AdvInd,
    ConnectReq,
    Data,
    EchoReq,
    EchoRsp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub channel: Channel,
    pub payload: Vec<u8>,
    pub sender: DeviceId,
    /// `None` for advertising broadcasts.
    pub receiver: Option<DeviceId>,
    pub send_time: TimeMs,
}

impl Frame {
    pub fn new(
        kind: FrameKind,
        channel: Channel,
        payload: Vec<u8>,
        sender: DeviceId,
        receiver: Option<DeviceId>,
        send_time: TimeMs,
    ) -> Result<Frame, RadioError> {
        let ok = match kind {
            FrameKind::AdvInd | FrameKind::ConnectReq => channel.is_advertising(),
            _ => channel == Channel::Data,
        };
        if !ok {
            return Err(RadioError::InvalidChannel {
                kind,
                channel: channel.number(),
            });
        }
        Ok(Frame {
            kind,
            channel,
            payload,
            sender,
            receiver,
            send_time,
        })
    }
}

/// Point-to-point propagation between two devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioLink {
    pub endpoint_a: DeviceId,
    pub endpoint_b: DeviceId,
    /// Meters.
    pub distance: f64,
    pub model: RssiModel,
    pub one_way_latency_ms: TimeMs,
}

impl RadioLink {
    pub fn validate(&self) -> Result<(), RadioError> {
        self.model.validate()?;
        if self.one_way_latency_ms == 0 {
            return Err(RadioError::InvalidLatency);
        }
        self.model.distribution(self.distance).map(|_| ())
    }

    pub fn expected_rssi(&self) -> Result<f64, RadioError> {
        self.model.distribution(self.distance).map(|(m, _)| m)
    }
}

/// RSSI of one frame crossing `link`: the model mean plus Gaussian shadowing
/// drawn from `rng`.
pub fn sample_rssi<R: rand::Rng + ?Sized>(link: &RadioLink, rng: &mut R) -> Result<f64, RadioError> {
    let (mean, std) = link.model.distribution(link.distance)?;
    Ok(sample_gaussian(mean, std, rng))
}

/// A frame arriving at one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub frame: Frame,
    pub receiver: DeviceId,
    pub rssi_dbm: f64,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub time_ms: TimeMs,
    pub kind: FrameKind,
    pub channel: u8,
    pub sender: Address,
    pub receiver: Option<Address>,
    pub rssi_dbm: Option<f64>,
    pub payload_hex: String,
}

#[derive(Debug, Clone)]
struct RadioNode {
    address: Address,
    role: GapRole,
}

fn link_key(a: DeviceId, b: DeviceId) -> (DeviceId, DeviceId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// The shared air. Owns the RSSI generator and the frame log.
pub struct Medium {
    nodes: BTreeMap<DeviceId, RadioNode>,
    links: BTreeMap<(DeviceId, DeviceId), RadioLink>,
    rng: ChaCha8Rng,
    log: Vec<FrameRecord>,
}

impl Medium {
    pub fn new(seed: u64) -> Medium {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Medium {
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            rng,
            log: Vec::new(),
        }
    }

    pub fn add_device(&mut self, id: DeviceId, address: Address, role: GapRole) {
        self.nodes.insert(id, RadioNode { address, role });
    }

    pub fn add_link(&mut self, link: RadioLink) -> Result<(), RadioError> {
        link.validate()?;
        for id in [link.endpoint_a, link.endpoint_b] {
            if !self.nodes.contains_key(&id) {
                return Err(RadioError::UnknownDevice(id));
            }
        }
        self.links
            .insert(link_key(link.endpoint_a, link.endpoint_b), link);
        Ok(())
    }

    pub fn link(&self, a: DeviceId, b: DeviceId) -> Option<&RadioLink> {
        self.links.get(&link_key(a, b))
    }

    pub fn address(&self, id: DeviceId) -> Option<Address> {
        self.nodes.get(&id).map(|n| n.address)
    }

    pub fn role(&self, id: DeviceId) -> Option<GapRole> {
        self.nodes.get(&id).map(|n| n.role)
    }

    pub fn latency(&self, a: DeviceId, b: DeviceId) -> Result<TimeMs, RadioError> {
        self.link(a, b)
            .map(|l| l.one_way_latency_ms)
            .ok_or(RadioError::NoLink(a, b))
    }

    /// Logs `frame` at its send time and schedules its delivery.
    ///
    /// Unicast frames get one RSSI sample from the link. Advertising
    /// broadcasts are delivered to every scanning-capable device linked to
    /// the sender, each with its own sample.
    pub fn transmit<E: From<Delivery>>(
        &mut self,
        queue: &mut EventQueue<E>,
        frame: Frame,
    ) -> Result<(), RadioError> {
        let sender = self
            .nodes
            .get(&frame.sender)
            .ok_or(RadioError::UnknownDevice(frame.sender))?;
        let role_ok = match frame.kind {
            FrameKind::AdvInd => sender.role.can_advertise(),
            FrameKind::ConnectReq => sender.role == GapRole::Central,
            _ => matches!(sender.role, GapRole::Central | GapRole::Peripheral),
        };
        if !role_ok {
            return Err(RadioError::RoleViolation {
                device: frame.sender,
                role: sender.role,
                kind: frame.kind,
            });
        }
        let sender_address = sender.address;
        match frame.receiver {
            Some(receiver) => {
                let link = self
                    .links
                    .get(&link_key(frame.sender, receiver))
                    .ok_or(RadioError::NoLink(frame.sender, receiver))?;
                let rssi = sample_rssi(link, &mut self.rng)?;
                let arrival = frame.send_time + link.one_way_latency_ms;
                self.log.push(FrameRecord {
                    time_ms: frame.send_time,
                    kind: frame.kind,
                    channel: frame.channel.number(),
                    sender: sender_address,
                    receiver: self.nodes.get(&receiver).map(|n| n.address),
                    rssi_dbm: Some(rssi),
                    payload_hex: hex::encode(&frame.payload),
                });
                queue.schedule_at(
                    arrival,
                    E::from(Delivery {
                        frame,
                        receiver,
                        rssi_dbm: rssi,
                    }),
                );
            }
            None => {
                self.log.push(FrameRecord {
                    time_ms: frame.send_time,
                    kind: frame.kind,
                    channel: frame.channel.number(),
                    sender: sender_address,
                    receiver: None,
                    rssi_dbm: None,
                    payload_hex: hex::encode(&frame.payload),
                });
                let listeners: Vec<(DeviceId, RadioLink)> = self
                    .links
                    .values()
                    .filter_map(|l| {
                        let other = if l.endpoint_a == frame.sender {
                            l.endpoint_b
                        } else if l.endpoint_b == frame.sender {
                            l.endpoint_a
                        } else {
                            return None;
                        };
                        let role = self.nodes.get(&other)?.role;
                        role.can_scan().then(|| (other, l.clone()))
                    })
                    .collect();
                for (receiver, link) in listeners {
                    let rssi = sample_rssi(&link, &mut self.rng)?;
                    queue.schedule_at(
                        frame.send_time + link.one_way_latency_ms,
                        E::from(Delivery {
                            frame: frame.clone(),
                            receiver,
                            rssi_dbm: rssi,
                        }),
                    );
                }
            }
        }
        Ok(())
    }

    /// Frame records sorted by send time (stable for equal times).
    pub fn records(&self) -> Vec<FrameRecord> {
        let mut out = self.log.clone();
        out.sort_by_key(|r| r.time_ms);
        out
    }

    pub fn record_count(&self) -> usize {
        self.log.len()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

const ADV_IND: u8 = 0x00;
const ADV_NONCONN_IND: u8 = 0x02;

/// Advertising payload: PDU type byte followed by AD structures (flags,
/// complete 16-bit service list, complete local name).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvertisingData {
    pub connectable: bool,
    pub name: String,
    pub services: Vec<Uuid>,
}

impl AdvertisingData {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![if self.connectable {
            ADV_IND
        } else {
            ADV_NONCONN_IND
        }];
        out.extend_from_slice(&[0x02, 0x01, 0x06]);
        let shorts: Vec<u16> = self.services.iter().filter_map(|u| u.as_short()).collect();
        if !shorts.is_empty() {
            out.push(1 + 2 * shorts.len() as u8);
            out.push(0x03);
            for s in shorts {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        let name = self.name.as_bytes();
        out.push(1 + name.len() as u8);
        out.push(0x09);
        out.extend_from_slice(name);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<AdvertisingData> {
        let (&pdu, mut rest) = bytes.split_first()?;
        let connectable = match pdu {
            ADV_IND => true,
            ADV_NONCONN_IND => false,
            _ => return None,
        };
        let mut name = String::new();
        let mut services = Vec::new();
        while let Some((&len, tail)) = rest.split_first() {
            let len = usize::from(len);
            if len == 0 || tail.len() < len {
                return None;
            }
            let (ad_type, data) = (tail[0], &tail[1..len]);
            match ad_type {
                0x03 => services.extend(
                    data.chunks_exact(2)
                        .map(|c| Uuid::Short(u16::from_le_bytes([c[0], c[1]]))),
                ),
                0x09 => name = String::from_utf8_lossy(data).into_owned(),
                _ => {}
            }
            rest = &tail[len..];
        }
        Some(AdvertisingData {
            connectable,
            name,
            services,
        })
    }
}
