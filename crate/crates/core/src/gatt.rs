//! GATT data model: UUIDs, characteristics, the attribute database and the
//! heart-rate measurement (0x2A37) byte layout.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Bluetooth base UUID `00000000-0000-1000-8000-00805f9b34fb`.
const BASE_UUID: u128 = 0x0000_0000_0000_1000_8000_0080_5f9b_34fb;
const SHORT_MASK: u128 = 0xffff_ffff << 96;

/// Largest attribute value the ATT layer can carry.
pub const MAX_ATTRIBUTE_LEN: usize = 512;

pub const HEART_RATE_SERVICE: Uuid = Uuid::Short(0x180d);
pub const HEART_RATE_MEASUREMENT: Uuid = Uuid::Short(0x2a37);
pub const BODY_SENSOR_LOCATION: Uuid = Uuid::Short(0x2a38);
pub const HEART_RATE_CONTROL_POINT: Uuid = Uuid::Short(0x2a39);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GattError {
    #[error("unknown characteristic {0}")]
    UnknownUuid(Uuid),
    #[error("{kind:?} not permitted on {uuid}")]
    PropertyViolation { uuid: Uuid, kind: OpKind },
    #[error("{kind:?} is a server-to-client operation")]
    NotServerOp { kind: OpKind },
    #[error("attribute value of {0} bytes exceeds the 512 byte maximum")]
    ValueTooLong(usize),
    #[error("{bpm} bpm does not fit the {format:?} format")]
    BpmOutOfRange { bpm: u32, format: HrFormat },
    #[error("measurement needs at least {needed} bytes, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("measurement flags imply {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("handle {0} is not strictly increasing")]
    NonMonotonicHandle(u16),
    #[error("handle 0 is reserved")]
    ZeroHandle,
    #[error("characteristic {characteristic} appears twice in service {service}")]
    DuplicateCharacteristic { service: Uuid, characteristic: Uuid },
    #[error("malformed database layout")]
    MalformedLayout,
    #[error("invalid uuid {0:?}")]
    InvalidUuid(String),
}

/// A 16-bit SIG-assigned or a full 128-bit UUID.
///
/// Equality, ordering and hashing go through the 128-bit expansion, so
/// `Short(0x180d)` equals the full form `0000180d-0000-1000-8000-00805f9b34fb`.
#[derive(Debug, Clone, Copy)]
pub enum Uuid {
    Short(u16),
    Full(u128),
}

impl Uuid {
    pub fn to_u128(self) -> u128 {
        match self {
            Uuid::Short(s) => BASE_UUID | (u128::from(s) << 96),
            Uuid::Full(v) => v,
        }
    }

    /// The 16-bit alias, if this UUID lies in the SIG base range.
    pub fn as_short(self) -> Option<u16> {
        match self {
            Uuid::Short(s) => Some(s),
            Uuid::Full(v) => {
                let s = (v >> 96) as u32;
                (v & !SHORT_MASK == BASE_UUID && s <= 0xffff).then_some(s as u16)
            }
        }
    }

    /// Little-endian wire form: 2 bytes for short UUIDs, 16 otherwise.
    pub fn to_le_bytes(self) -> Vec<u8> {
        match self {
            Uuid::Short(s) => s.to_le_bytes().to_vec(),
            Uuid::Full(v) => v.to_le_bytes().to_vec(),
        }
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<Uuid> {
        match bytes.len() {
            2 => Some(Uuid::Short(u16::from_le_bytes([bytes[0], bytes[1]]))),
            16 => Some(Uuid::Full(u128::from_le_bytes(bytes.try_into().ok()?))),
            _ => None,
        }
    }
}

impl PartialEq for Uuid {
    fn eq(&self, other: &Self) -> bool {
        self.to_u128() == other.to_u128()
    }
}

impl Eq for Uuid {}

impl Hash for Uuid {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.to_u128().hash(state);
    }
}

impl PartialOrd for Uuid {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Uuid {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_u128().cmp(&other.to_u128())
    }
}

impl fmt::Display for Uuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Uuid::Short(s) => write!(f, "0x{s:04x}"),
            Uuid::Full(v) => write!(
                f,
                "{:08x}-{:04x}-{:04x}-{:04x}-{:012x}",
                v >> 96,
                (v >> 80) & 0xffff,
                (v >> 64) & 0xffff,
                (v >> 48) & 0xffff,
                v & 0xffff_ffff_ffff
            ),
        }
    }
}

impl FromStr for Uuid {
    type Err = GattError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || GattError::InvalidUuid(s.to_string());
        let t = s.trim();
        let t = t
            .strip_prefix("0x")
            .or_else(|| t.strip_prefix("0X"))
            .unwrap_or(t);
        let hex: String = t.chars().filter(|c| *c != '-').collect();
        match hex.len() {
            4 => u16::from_str_radix(&hex, 16)
                .map(Uuid::Short)
                .map_err(|_| invalid()),
            32 => u128::from_str_radix(&hex, 16)
                .map(Uuid::Full)
                .map_err(|_| invalid()),
            _ => Err(invalid()),
        }
    }
}

impl Serialize for Uuid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Uuid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Characteristic property bits, using the ATT declaration bit positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Properties(u8);

impl Properties {
    pub const READ: Properties = Properties(0x02);
    pub const WRITE: Properties = Properties(0x08);
    pub const NOTIFY: Properties = Properties(0x10);
    pub const INDICATE: Properties = Properties(0x20);

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn from_bits(bits: u8) -> Properties {
        Properties(bits & 0x3a)
    }

    pub const fn union(self, other: Properties) -> Properties {
        Properties(self.0 | other.0)
    }

    pub const fn contains(self, other: Properties) -> bool {
        self.0 & other.0 == other.0
    }
}

impl std::ops::BitOr for Properties {
    type Output = Properties;

    fn bitor(self, rhs: Properties) -> Properties {
        self.union(rhs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Characteristic {
    pub uuid: Uuid,
    pub handle: u16,
    pub properties: Properties,
    pub value: Vec<u8>,
    /// Client characteristic configuration: a peer asked for notifications.
    pub subscribed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Service {
    pub uuid: Uuid,
    pub handle: u16,
    pub characteristics: Vec<Characteristic>,
}

/// Ordered GATT table. Handles increase strictly across the whole database.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeDatabase {
    services: Vec<Service>,
}

/// Assigns handles from 1 upward in declaration order.
#[derive(Debug, Default)]
pub struct DatabaseBuilder {
    services: Vec<Service>,
    next_handle: u16,
}

impl DatabaseBuilder {
    pub fn service(mut self, uuid: Uuid) -> Self {
        self.next_handle += 1;
        self.services.push(Service {
            uuid,
            handle: self.next_handle,
            characteristics: Vec::new(),
        });
        self
    }

    /// Adds a characteristic to the most recently declared service.
    ///
    /// Panics if no service was declared first.
    pub fn characteristic(mut self, uuid: Uuid, properties: Properties, value: &[u8]) -> Self {
        self.next_handle += 1;
        let handle = self.next_handle;
        let service = self
            .services
            .last_mut()
            .expect("characteristic declared before any service");
        service.characteristics.push(Characteristic {
            uuid,
            handle,
            properties,
            value: value.to_vec(),
            subscribed: false,
        });
        self
    }

    pub fn build(self) -> Result<AttributeDatabase, GattError> {
        AttributeDatabase::from_services(self.services)
    }
}

impl AttributeDatabase {
    pub fn builder() -> DatabaseBuilder {
        DatabaseBuilder::default()
    }

    pub fn from_services(services: Vec<Service>) -> Result<Self, GattError> {
        let db = AttributeDatabase { services };
        db.validate()?;
        Ok(db)
    }

    /// Checks handle monotonicity, value caps and per-service uniqueness.
    pub fn validate(&self) -> Result<(), GattError> {
        let mut last = 0u16;
        for service in &self.services {
            check_handle(service.handle, &mut last)?;
            for (i, c) in service.characteristics.iter().enumerate() {
                check_handle(c.handle, &mut last)?;
                if c.value.len() > MAX_ATTRIBUTE_LEN {
                    return Err(GattError::ValueTooLong(c.value.len()));
                }
                if service.characteristics[..i].iter().any(|o| o.uuid == c.uuid) {
                    return Err(GattError::DuplicateCharacteristic {
                        service: service.uuid,
                        characteristic: c.uuid,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn services(&self) -> &[Service] {
        &self.services
    }

    pub fn characteristics(&self) -> impl Iterator<Item = &Characteristic> {
        self.services.iter().flat_map(|s| s.characteristics.iter())
    }

    pub fn contains_service(&self, uuid: Uuid) -> bool {
        self.services.iter().any(|s| s.uuid == uuid)
    }

    /// First characteristic with this UUID, in handle order.
    pub fn lookup(&self, uuid: Uuid) -> Option<&Characteristic> {
        self.characteristics().find(|c| c.uuid == uuid)
    }

    fn lookup_mut(&mut self, uuid: Uuid) -> Result<&mut Characteristic, GattError> {
        self.services
            .iter_mut()
            .flat_map(|s| s.characteristics.iter_mut())
            .find(|c| c.uuid == uuid)
            .ok_or(GattError::UnknownUuid(uuid))
    }

    /// Server-local value update (sensor writes its own measurement).
    pub fn set_value(&mut self, uuid: Uuid, value: &[u8]) -> Result<(), GattError> {
        if value.len() > MAX_ATTRIBUTE_LEN {
            return Err(GattError::ValueTooLong(value.len()));
        }
        self.lookup_mut(uuid)?.value = value.to_vec();
        Ok(())
    }

    pub fn is_subscribed(&self, uuid: Uuid) -> bool {
        self.lookup(uuid).is_some_and(|c| c.subscribed)
    }

    /// Drops every client subscription, as happens on disconnect.
    pub fn clear_subscriptions(&mut self) {
        for s in &mut self.services {
            for c in &mut s.characteristics {
                c.subscribed = false;
            }
        }
    }

    /// Executes a client request against this server database.
    ///
    /// Only the addressed characteristic is touched. `Read` yields a
    /// `ReadResponse` carrying the same op id; `Write` and `Subscribe`
    /// produce no response.
    pub fn apply(&mut self, op: &GattOp) -> Result<Option<GattOp>, GattError> {
        let needed = match op.kind {
            OpKind::Read => Properties::READ,
            OpKind::Write => Properties::WRITE,
            OpKind::Subscribe => Properties::NOTIFY,
            OpKind::Notify | OpKind::ReadResponse => {
                return Err(GattError::NotServerOp { kind: op.kind })
            }
        };
        let characteristic = self.lookup_mut(op.target)?;
        let allowed = characteristic.properties.contains(needed)
            || (op.kind == OpKind::Subscribe
                && characteristic.properties.contains(Properties::INDICATE));
        if !allowed {
            return Err(GattError::PropertyViolation {
                uuid: op.target,
                kind: op.kind,
            });
        }
        match op.kind {
            OpKind::Read => Ok(Some(GattOp {
                kind: OpKind::ReadResponse,
                target: op.target,
                payload: characteristic.value.clone(),
                op_id: op.op_id,
            })),
            OpKind::Write => {
                if op.payload.len() > MAX_ATTRIBUTE_LEN {
                    return Err(GattError::ValueTooLong(op.payload.len()));
                }
                characteristic.value = op.payload.clone();
                Ok(None)
            }
            _ => {
                characteristic.subscribed = true;
                Ok(None)
            }
        }
    }

    /// Same services, characteristics, handles and properties; values and
    /// subscription state are ignored.
    pub fn same_structure(&self, other: &AttributeDatabase) -> bool {
        self.services.len() == other.services.len()
            && self.services.iter().zip(&other.services).all(|(a, b)| {
                a.uuid == b.uuid
                    && a.handle == b.handle
                    && a.characteristics.len() == b.characteristics.len()
                    && a.characteristics.iter().zip(&b.characteristics).all(|(x, y)| {
                        x.uuid == y.uuid && x.handle == y.handle && x.properties == y.properties
                    })
            })
    }

    /// Structure-only copy with empty values, as rebuilt by a client from
    /// service discovery.
    pub fn structural_copy(&self) -> AttributeDatabase {
        let mut copy = self.clone();
        for s in &mut copy.services {
            for c in &mut s.characteristics {
                c.value.clear();
                c.subscribed = false;
            }
        }
        copy
    }

    /// Discovery encoding: for each service `[0x00, handle:2, uuid_len, uuid..]`
    /// followed by its characteristics as `[0x01, handle:2, props, uuid_len, uuid..]`.
    pub fn encode_layout(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.services {
            out.push(0x00);
            out.extend_from_slice(&s.handle.to_le_bytes());
            push_uuid(&mut out, s.uuid);
            for c in &s.characteristics {
                out.push(0x01);
                out.extend_from_slice(&c.handle.to_le_bytes());
                out.push(c.properties.bits());
                push_uuid(&mut out, c.uuid);
            }
        }
        out
    }

    pub fn decode_layout(bytes: &[u8]) -> Result<AttributeDatabase, GattError> {
        let mut services: Vec<Service> = Vec::new();
        let mut rest = bytes;
        while let Some((&tag, tail)) = rest.split_first() {
            if tail.len() < 2 {
                return Err(GattError::MalformedLayout);
            }
            let handle = u16::from_le_bytes([tail[0], tail[1]]);
            let tail = &tail[2..];
            match tag {
                0x00 => {
                    let (uuid, tail) = take_uuid(tail)?;
                    services.push(Service {
                        uuid,
                        handle,
                        characteristics: Vec::new(),
                    });
                    rest = tail;
                }
                0x01 => {
                    let (&props, tail) = tail.split_first().ok_or(GattError::MalformedLayout)?;
                    let (uuid, tail) = take_uuid(tail)?;
                    services
                        .last_mut()
                        .ok_or(GattError::MalformedLayout)?
                        .characteristics
                        .push(Characteristic {
                            uuid,
                            handle,
                            properties: Properties::from_bits(props),
                            value: Vec::new(),
                            subscribed: false,
                        });
                    rest = tail;
                }
                _ => return Err(GattError::MalformedLayout),
            }
        }
        AttributeDatabase::from_services(services)
    }
}

fn check_handle(handle: u16, last: &mut u16) -> Result<(), GattError> {
    if handle == 0 {
        return Err(GattError::ZeroHandle);
    }
    if handle <= *last {
        return Err(GattError::NonMonotonicHandle(handle));
    }
    *last = handle;
    Ok(())
}

fn push_uuid(out: &mut Vec<u8>, uuid: Uuid) {
    let bytes = uuid.to_le_bytes();
    out.push(bytes.len() as u8);
    out.extend_from_slice(&bytes);
}

fn take_uuid(bytes: &[u8]) -> Result<(Uuid, &[u8]), GattError> {
    let (&len, tail) = bytes.split_first().ok_or(GattError::MalformedLayout)?;
    let len = usize::from(len);
    if tail.len() < len {
        return Err(GattError::MalformedLayout);
    }
    let uuid = Uuid::from_le_bytes(&tail[..len]).ok_or(GattError::MalformedLayout)?;
    Ok((uuid, &tail[len..]))
}

/// Heart-rate service 0x180D with measurement 0x2A37 (notify, read), body
/// sensor location 0x2A38 (read, "chest") and control point 0x2A39 (write).
pub fn build_heart_rate_profile() -> AttributeDatabase {
    AttributeDatabase::builder()
        .service(HEART_RATE_SERVICE)
        .characteristic(
            HEART_RATE_MEASUREMENT,
            Properties::NOTIFY | Properties::READ,
            &[0x00, 0x00],
        )
        .characteristic(BODY_SENSOR_LOCATION, Properties::READ, &[0x01])
        .characteristic(HEART_RATE_CONTROL_POINT, Properties::WRITE, &[])
        .build()
        .expect("static heart-rate profile is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    ReadResponse,
    Write,
    Notify,
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GattOp {
    pub kind: OpKind,
    pub target: Uuid,
    pub payload: Vec<u8>,
    pub op_id: u64,
}

impl GattOp {
    pub fn new(kind: OpKind, target: Uuid, payload: Vec<u8>, op_id: u64) -> Self {
        GattOp {
            kind,
            target,
            payload,
            op_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HrFormat {
    Uint8,
    Uint16,
}

/// Decoded 0x2A37 value: flags byte then the little-endian bpm.
///
/// Flags bit 0 selects the bpm width. Bit 2 says sensor contact is
/// supported and bit 1 carries the contact status. Energy-expended and
/// RR-interval fields are not modelled; when their flag bits are set the
/// trailing bytes are accepted and ignored by `decode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartRateMeasurement {
    pub format: HrFormat,
    pub bpm: u16,
    pub sensor_contact: Option<bool>,
}

const FLAG_UINT16: u8 = 0x01;
const FLAG_CONTACT_DETECTED: u8 = 0x02;
const FLAG_CONTACT_SUPPORTED: u8 = 0x04;
const FLAG_OPTIONAL_FIELDS: u8 = 0x18;

impl HeartRateMeasurement {
    pub fn new(format: HrFormat, bpm: u32) -> Result<Self, GattError> {
        let max = match format {
            HrFormat::Uint8 => u32::from(u8::MAX),
            HrFormat::Uint16 => u32::from(u16::MAX),
        };
        if bpm > max {
            return Err(GattError::BpmOutOfRange { bpm, format });
        }
        Ok(HeartRateMeasurement {
            format,
            bpm: bpm as u16,
            sensor_contact: None,
        })
    }

    /// Narrowest format that holds `bpm`, saturating at 65535.
    pub fn fitting(bpm: u32) -> Self {
        let bpm = bpm.min(u32::from(u16::MAX));
        let format = if bpm > 255 {
            HrFormat::Uint16
        } else {
            HrFormat::Uint8
        };
        HeartRateMeasurement {
            format,
            bpm: bpm as u16,
            sensor_contact: None,
        }
    }

    pub fn with_contact(mut self, contact: Option<bool>) -> Self {
        self.sensor_contact = contact;
        self
    }

    pub fn encode(&self) -> Result<Vec<u8>, GattError> {
        let mut flags = 0u8;
        match self.sensor_contact {
            Some(true) => flags |= FLAG_CONTACT_SUPPORTED | FLAG_CONTACT_DETECTED,
            Some(false) => flags |= FLAG_CONTACT_SUPPORTED,
            None => {}
        }
        match self.format {
            HrFormat::Uint8 => {
                let bpm = u8::try_from(self.bpm).map_err(|_| GattError::BpmOutOfRange {
                    bpm: u32::from(self.bpm),
                    format: self.format,
                })?;
                Ok(vec![flags, bpm])
            }
            HrFormat::Uint16 => {
                let [lo, hi] = self.bpm.to_le_bytes();
                Ok(vec![flags | FLAG_UINT16, lo, hi])
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GattError> {
        let Some((&flags, body)) = bytes.split_first() else {
            return Err(GattError::TooShort {
                needed: 2,
                got: 0,
            });
        };
        if body.is_empty() {
            return Err(GattError::TooShort {
                needed: 2,
                got: bytes.len(),
            });
        }
        let (format, width) = if flags & FLAG_UINT16 != 0 {
            (HrFormat::Uint16, 2)
        } else {
            (HrFormat::Uint8, 1)
        };
        let expected = 1 + width;
        let exact = flags & FLAG_OPTIONAL_FIELDS == 0;
        if bytes.len() < expected || (exact && bytes.len() != expected) {
            return Err(GattError::LengthMismatch {
                expected,
                got: bytes.len(),
            });
        }
        let bpm = match format {
            HrFormat::Uint8 => u16::from(body[0]),
            HrFormat::Uint16 => u16::from_le_bytes([body[0], body[1]]),
        };
        let sensor_contact =
            (flags & FLAG_CONTACT_SUPPORTED != 0).then_some(flags & FLAG_CONTACT_DETECTED != 0);
        Ok(HeartRateMeasurement {
            format,
            bpm,
            sensor_contact,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hr(format: HrFormat, bpm: u32) -> HeartRateMeasurement {
        HeartRateMeasurement::new(format, bpm).unwrap()
    }

    #[test]
    fn short_and_full_uuid_forms_compare_equal() {
        let full: Uuid = "0000180d-0000-1000-8000-00805f9b34fb".parse().unwrap();
        assert_eq!(full, HEART_RATE_SERVICE);
        assert_eq!(full.as_short(), Some(0x180d));
        let other: Uuid = "0000180d-0000-1000-8000-00805f9b34fc".parse().unwrap();
        assert_ne!(other, HEART_RATE_SERVICE);
        assert_eq!(other.as_short(), None);
    }

    #[test]
    fn uuid_text_is_lowercase() {
        assert_eq!(HEART_RATE_MEASUREMENT.to_string(), "0x2a37");
        let full = Uuid::Full(HEART_RATE_MEASUREMENT.to_u128());
        assert_eq!(full.to_string(), "00002a37-0000-1000-8000-00805f9b34fb");
        assert_eq!("0x2A37".parse::<Uuid>().unwrap(), HEART_RATE_MEASUREMENT);
        assert!("0x2a3".parse::<Uuid>().is_err());
    }

    #[test]
    fn heart_rate_profile_layout() {
        let db = build_heart_rate_profile();
        assert_eq!(db.services().len(), 1);
        assert_eq!(db.services()[0].uuid, Uuid::Short(0x180d));
        assert_eq!(db.services()[0].handle, 1);
        let m = db.lookup(Uuid::Short(0x2a37)).unwrap();
        assert!(m.properties.contains(Properties::NOTIFY));
        assert!(m.properties.contains(Properties::READ));
        assert_eq!(m.handle, 2);
        assert_eq!(db, build_heart_rate_profile());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(hr(HrFormat::Uint8, 70).encode().unwrap(), vec![0x00, 0x46]);
        assert_eq!(hr(HrFormat::Uint8, 255).encode().unwrap(), vec![0x00, 0xff]);
        assert_eq!(
            hr(HrFormat::Uint16, 300).encode().unwrap(),
            vec![0x01, 0x2c, 0x01]
        );
        let contact = hr(HrFormat::Uint8, 70).with_contact(Some(true));
        assert_eq!(contact.encode().unwrap(), vec![0x06, 0x46]);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(matches!(
            HeartRateMeasurement::new(HrFormat::Uint8, 256),
            Err(GattError::BpmOutOfRange { .. })
        ));
        let bad = HeartRateMeasurement {
            format: HrFormat::Uint8,
            bpm: 300,
            sensor_contact: None,
        };
        assert!(matches!(bad.encode(), Err(GattError::BpmOutOfRange { .. })));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            HeartRateMeasurement::decode(&[0x00, 0x46]).unwrap(),
            hr(HrFormat::Uint8, 70)
        );
        assert_eq!(
            HeartRateMeasurement::decode(&[0x01, 0x2c, 0x01]).unwrap(),
            hr(HrFormat::Uint16, 300)
        );
        assert!(matches!(
            HeartRateMeasurement::decode(&[]),
            Err(GattError::TooShort { .. })
        ));
        assert!(matches!(
            HeartRateMeasurement::decode(&[0x00]),
            Err(GattError::TooShort { .. })
        ));
        assert!(matches!(
            HeartRateMeasurement::decode(&[0x01, 0x2c]),
            Err(GattError::LengthMismatch { .. })
        ));
        assert!(matches!(
            HeartRateMeasurement::decode(&[0x00, 0x46, 0x00]),
            Err(GattError::LengthMismatch { .. })
        ));
        // RR-interval flag: trailing bytes are tolerated.
        assert_eq!(
            HeartRateMeasurement::decode(&[0x10, 0x46, 0x00, 0x04]).unwrap().bpm,
            70
        );
    }

    #[test]
    fn read_back_after_set() {
        let mut db = build_heart_rate_profile();
        db.set_value(HEART_RATE_MEASUREMENT, &[0x00, 0x46]).unwrap();
        let rsp = db
            .apply(&GattOp::new(OpKind::Read, HEART_RATE_MEASUREMENT, vec![], 7))
            .unwrap()
            .unwrap();
        assert_eq!(rsp.kind, OpKind::ReadResponse);
        assert_eq!(rsp.payload, vec![0x00, 0x46]);
        assert_eq!(rsp.op_id, 7);
    }

    #[test]
    fn property_gates() {
        let mut db = build_heart_rate_profile();
        let write = GattOp::new(OpKind::Write, HEART_RATE_MEASUREMENT, vec![1], 1);
        assert_eq!(
            db.apply(&write),
            Err(GattError::PropertyViolation {
                uuid: HEART_RATE_MEASUREMENT,
                kind: OpKind::Write
            })
        );
        let sub = GattOp::new(OpKind::Subscribe, BODY_SENSOR_LOCATION, vec![], 2);
        assert!(matches!(
            db.apply(&sub),
            Err(GattError::PropertyViolation { .. })
        ));
        let unknown = GattOp::new(OpKind::Read, Uuid::Short(0x2a00), vec![], 3);
        assert_eq!(
            db.apply(&unknown),
            Err(GattError::UnknownUuid(Uuid::Short(0x2a00)))
        );
        let notify = GattOp::new(OpKind::Notify, HEART_RATE_MEASUREMENT, vec![], 4);
        assert!(matches!(
            db.apply(&notify),
            Err(GattError::NotServerOp { .. })
        ));
        let long = GattOp::new(OpKind::Write, HEART_RATE_CONTROL_POINT, vec![0; 513], 5);
        assert_eq!(db.apply(&long), Err(GattError::ValueTooLong(513)));
        assert_eq!(db, build_heart_rate_profile());
    }

    #[test]
    fn subscribe_marks_characteristic() {
        let mut db = build_heart_rate_profile();
        assert!(!db.is_subscribed(HEART_RATE_MEASUREMENT));
        let sub = GattOp::new(OpKind::Subscribe, HEART_RATE_MEASUREMENT, vec![], 1);
        assert_eq!(db.apply(&sub), Ok(None));
        assert!(db.is_subscribed(HEART_RATE_MEASUREMENT));
        db.clear_subscriptions();
        assert!(!db.is_subscribed(HEART_RATE_MEASUREMENT));
    }

    #[test]
    fn validation_rejects_bad_handles() {
        let services = vec![Service {
            uuid: HEART_RATE_SERVICE,
            handle: 3,
            characteristics: vec![Characteristic {
                uuid: HEART_RATE_MEASUREMENT,
                handle: 2,
                properties: Properties::NOTIFY,
                value: vec![],
                subscribed: false,
            }],
        }];
        assert_eq!(
            AttributeDatabase::from_services(services),
            Err(GattError::NonMonotonicHandle(2))
        );
        let dup = AttributeDatabase::builder()
            .service(HEART_RATE_SERVICE)
            .characteristic(HEART_RATE_MEASUREMENT, Properties::NOTIFY, &[])
            .characteristic(HEART_RATE_MEASUREMENT, Properties::READ, &[])
            .build();
        assert!(matches!(
            dup,
            Err(GattError::DuplicateCharacteristic { .. })
        ));
    }

    #[test]
    fn layout_round_trip_preserves_structure() {
        let db = AttributeDatabase::builder()
            .service(HEART_RATE_SERVICE)
            .characteristic(HEART_RATE_MEASUREMENT, Properties::NOTIFY, &[1, 2])
            .service(Uuid::Full(0x6e40_0001_b5a3_f393_e0a9_e50e_24dc_ca9e))
            .characteristic(
                Uuid::Full(0x6e40_0002_b5a3_f393_e0a9_e50e_24dc_ca9e),
                Properties::WRITE,
                &[],
            )
            .build()
            .unwrap();
        let decoded = AttributeDatabase::decode_layout(&db.encode_layout()).unwrap();
        assert!(decoded.same_structure(&db));
        assert_eq!(decoded, db.structural_copy());
        assert!(AttributeDatabase::decode_layout(&[0x01, 0x02]).is_err());
    }

    fn arb_op() -> impl Strategy<Value = GattOp> {
        let kinds = prop_oneof![
            Just(OpKind::Read),
            Just(OpKind::Write),
            Just(OpKind::Subscribe),
            Just(OpKind::Notify),
            Just(OpKind::ReadResponse),
        ];
        let targets = prop_oneof![
            Just(HEART_RATE_MEASUREMENT),
            Just(BODY_SENSOR_LOCATION),
            Just(HEART_RATE_CONTROL_POINT),
            Just(Uuid::Short(0x2a00)),
        ];
        (kinds, targets, prop::collection::vec(any::<u8>(), 0..600), any::<u64>())
            .prop_map(|(k, t, p, id)| GattOp::new(k, t, p, id))
    }

    proptest! {
        #[test]
        fn hr_round_trip(bpm in 0u32..=65535, wide in any::<bool>(), contact in prop::option::of(any::<bool>())) {
            let format = if wide || bpm > 255 { HrFormat::Uint16 } else { HrFormat::Uint8 };
            let m = HeartRateMeasurement::new(format, bpm).unwrap().with_contact(contact);
            prop_assert_eq!(HeartRateMeasurement::decode(&m.encode().unwrap()).unwrap(), m);
        }

        #[test]
        fn apply_touches_only_the_target(ops in prop::collection::vec(arb_op(), 1..20)) {
            let mut db = build_heart_rate_profile();
            for op in ops {
                let before = db.clone();
                let _ = db.apply(&op);
                prop_assert!(db.validate().is_ok());
                prop_assert!(db.same_structure(&before));
                for (a, b) in db.characteristics().zip(before.characteristics()) {
                    if a.uuid != op.target {
                        prop_assert_eq!(a, b);
                    }
                }
            }
        }
    }
}
