//! GAP on top of the medium: cyclic advertising, scanning, connection
//! setup and L2CAP-style echo.
//!
//! A scanning central configured to auto-connect sends a ConnectReq on the
//! channel of the first matching connectable advertisement. The
//! peripheral accepts the first ConnectReq that reaches it while it is
//! advertising and stops advertising; every later one is refused.

use std::collections::BTreeMap;

use super::{
    check_can_advertise, Address, AdvertisingData, Channel, Delivery, DeviceId, EventQueue, Frame,
    FrameKind, GapRole, Medium, RadioError, TimeMs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnectionId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub enum GapEvent {
    Deliver(Delivery),
    AdvCycle { device: DeviceId, epoch: u64 },
    ScanTimeout { device: DeviceId, epoch: u64 },
}

impl From<Delivery> for GapEvent {
    fn from(d: Delivery) -> Self {
        GapEvent::Deliver(d)
    }
}

/// Which advertisements a scanner reacts to. Empty matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanFilter {
    pub name: Option<String>,
    pub address: Option<Address>,
}

impl ScanFilter {
    pub fn matches(&self, address: Address, adv: &AdvertisingData) -> bool {
        self.name.as_ref().is_none_or(|n| *n == adv.name)
            && self.address.is_none_or(|a| a == address)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GapNotice {
    AdvSeen {
        scanner: DeviceId,
        advertiser: DeviceId,
        address: Address,
        adv: AdvertisingData,
        rssi_dbm: f64,
    },
    Connected {
        conn: ConnectionId,
        central: DeviceId,
        peripheral: DeviceId,
    },
    ConnectFailed {
        central: DeviceId,
        peer: DeviceId,
    },
    ScanTimeout {
        device: DeviceId,
    },
    Data {
        conn: ConnectionId,
        from: DeviceId,
        to: DeviceId,
        payload: Vec<u8>,
        rssi_dbm: f64,
    },
    EchoRequest {
        conn: ConnectionId,
        from: DeviceId,
        to: DeviceId,
        id: u8,
    },
    EchoResponse {
        conn: ConnectionId,
        to: DeviceId,
        id: u8,
        status: u8,
        /// `None` when no request with this id was outstanding.
        rtt_ms: Option<TimeMs>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapConnection {
    pub central: DeviceId,
    pub peripheral: DeviceId,
    pub established_ms: TimeMs,
}

impl GapConnection {
    pub fn peer_of(&self, device: DeviceId) -> Option<DeviceId> {
        if device == self.central {
            Some(self.peripheral)
        } else if device == self.peripheral {
            Some(self.central)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
struct Advertising {
    interval_ms: TimeMs,
    payload: Vec<u8>,
    connectable: bool,
}

#[derive(Debug, Clone)]
struct Scanning {
    filter: ScanFilter,
    auto_connect: bool,
}

#[derive(Debug, Clone)]
struct Station {
    role: GapRole,
    adv: Option<Advertising>,
    adv_epoch: u64,
    scan: Option<Scanning>,
    scan_epoch: u64,
    connecting: Option<DeviceId>,
    conn: Option<ConnectionId>,
}

#[derive(Debug, Default)]
pub struct Gap {
    stations: BTreeMap<DeviceId, Station>,
    connections: BTreeMap<ConnectionId, GapConnection>,
    next_conn: u32,
    pending_echo: BTreeMap<(DeviceId, u8), TimeMs>,
}

impl Gap {
    pub fn new() -> Gap {
        Gap::default()
    }

    pub fn register(&mut self, id: DeviceId, role: GapRole) {
        self.stations.insert(
            id,
            Station {
                role,
                adv: None,
                adv_epoch: 0,
                scan: None,
                scan_epoch: 0,
                connecting: None,
                conn: None,
            },
        );
    }

    fn station(&mut self, id: DeviceId) -> Result<&mut Station, RadioError> {
        self.stations.get_mut(&id).ok_or(RadioError::UnknownDevice(id))
    }

    /// Starts cyclic advertising now: one AdvInd on each of channels 37, 38
    /// and 39 every `interval_ms`. Broadcasters always advertise
    /// non-connectable.
    pub fn start_advertising<E: From<GapEvent>>(
        &mut self,
        queue: &mut EventQueue<E>,
        device: DeviceId,
        interval_ms: TimeMs,
        adv: &AdvertisingData,
    ) -> Result<(), RadioError> {
        if interval_ms == 0 {
            return Err(RadioError::InvalidParams("advertising interval must be positive"));
        }
        let st = self.station(device)?;
        check_can_advertise(device, st.role)?;
        let connectable = adv.connectable && st.role == GapRole::Peripheral;
        let adv = AdvertisingData {
            connectable,
            ..adv.clone()
        };
        st.adv_epoch += 1;
        st.adv = Some(Advertising {
            interval_ms,
            payload: adv.encode(),
            connectable,
        });
        let epoch = st.adv_epoch;
        queue.schedule_in(0, E::from(GapEvent::AdvCycle { device, epoch }));
        Ok(())
    }

    pub fn stop_advertising(&mut self, device: DeviceId) {
        if let Some(st) = self.stations.get_mut(&device) {
            st.adv = None;
            st.adv_epoch += 1;
        }
    }

    pub fn is_advertising(&self, device: DeviceId) -> bool {
        self.stations.get(&device).is_some_and(|s| s.adv.is_some())
    }

    pub fn is_scanning(&self, device: DeviceId) -> bool {
        self.stations.get(&device).is_some_and(|s| s.scan.is_some())
    }

    /// Starts scanning now. With `auto_connect`, the first matching
    /// connectable advertisement triggers a ConnectReq.
    pub fn start_scan<E: From<GapEvent>>(
        &mut self,
        queue: &mut EventQueue<E>,
        device: DeviceId,
        filter: ScanFilter,
        timeout_ms: Option<TimeMs>,
        auto_connect: bool,
    ) -> Result<(), RadioError> {
        let st = self.station(device)?;
        if !st.role.can_scan() {
            return Err(RadioError::RoleViolation {
                device,
                role: st.role,
                kind: FrameKind::ConnectReq,
            });
        }
        st.scan_epoch += 1;
        st.scan = Some(Scanning {
            filter,
            auto_connect: auto_connect && st.role == GapRole::Central,
        });
        st.connecting = None;
        let epoch = st.scan_epoch;
        if let Some(t) = timeout_ms {
            queue.schedule_in(t, E::from(GapEvent::ScanTimeout { device, epoch }));
        }
        Ok(())
    }

    pub fn stop_scan(&mut self, device: DeviceId) {
        if let Some(st) = self.stations.get_mut(&device) {
            st.scan = None;
            st.scan_epoch += 1;
        }
    }

    pub fn connection(&self, conn: ConnectionId) -> Option<&GapConnection> {
        self.connections.get(&conn)
    }

    pub fn connection_of(&self, device: DeviceId) -> Option<ConnectionId> {
        self.stations.get(&device).and_then(|s| s.conn)
    }

    pub fn peer_of(&self, device: DeviceId) -> Option<DeviceId> {
        let conn = self.connection_of(device)?;
        self.connections.get(&conn)?.peer_of(device)
    }

    pub fn connections(&self) -> impl Iterator<Item = (ConnectionId, &GapConnection)> {
        self.connections.iter().map(|(id, c)| (*id, c))
    }

    /// Tears the link down on both ends. Frames still in flight are
    /// discarded on arrival.
    pub fn disconnect(&mut self, conn: ConnectionId) -> Option<GapConnection> {
        let c = self.connections.remove(&conn)?;
        for d in [c.central, c.peripheral] {
            if let Some(st) = self.stations.get_mut(&d) {
                st.conn = None;
            }
            self.pending_echo.retain(|(dev, _), _| *dev != d);
        }
        Some(c)
    }

    fn unicast<E: From<Delivery>>(
        &self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        kind: FrameKind,
        from: DeviceId,
        payload: Vec<u8>,
        send_time: TimeMs,
    ) -> Result<(), RadioError> {
        let to = self.peer_of(from).ok_or(RadioError::NotConnected)?;
        let frame = Frame::new(kind, Channel::Data, payload, from, Some(to), send_time)?;
        medium.transmit(queue, frame)
    }

    pub fn send_data<E: From<Delivery>>(
        &self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        from: DeviceId,
        payload: Vec<u8>,
        send_time: TimeMs,
    ) -> Result<(), RadioError> {
        self.unicast(medium, queue, FrameKind::Data, from, payload, send_time)
    }

    pub fn send_echo_request<E: From<Delivery>>(
        &mut self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        from: DeviceId,
        id: u8,
        send_time: TimeMs,
    ) -> Result<(), RadioError> {
        self.unicast(medium, queue, FrameKind::EchoReq, from, vec![id], send_time)?;
        self.pending_echo.insert((from, id), send_time);
        Ok(())
    }

    pub fn send_echo_response<E: From<Delivery>>(
        &self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        from: DeviceId,
        id: u8,
        status: u8,
        send_time: TimeMs,
    ) -> Result<(), RadioError> {
        self.unicast(medium, queue, FrameKind::EchoRsp, from, vec![id, status], send_time)
    }

    fn link_between(&self, a: DeviceId, b: DeviceId) -> Option<ConnectionId> {
        let conn = self.connection_of(a)?;
        (self.connections.get(&conn)?.peer_of(a) == Some(b)).then_some(conn)
    }

    /// Processes one GAP event at `now`.
    pub fn handle<E: From<GapEvent> + From<Delivery>>(
        &mut self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        now: TimeMs,
        event: GapEvent,
    ) -> Result<Vec<GapNotice>, RadioError> {
        match event {
            GapEvent::AdvCycle { device, epoch } => {
                let Some(st) = self.stations.get(&device) else {
                    return Ok(vec![]);
                };
                let Some(adv) = st.adv.as_ref().filter(|_| st.adv_epoch == epoch) else {
                    return Ok(vec![]);
                };
                let (payload, interval) = (adv.payload.clone(), adv.interval_ms);
                for ch in Channel::ADVERTISING {
                    let frame = Frame::new(FrameKind::AdvInd, ch, payload.clone(), device, None, now)?;
                    medium.transmit(queue, frame)?;
                }
                queue.schedule_at(now + interval, E::from(GapEvent::AdvCycle { device, epoch }));
                Ok(vec![])
            }
            GapEvent::ScanTimeout { device, epoch } => {
                let Some(st) = self.stations.get_mut(&device) else {
                    return Ok(vec![]);
                };
                if st.scan.is_none() || st.scan_epoch != epoch {
                    return Ok(vec![]);
                }
                st.scan = None;
                Ok(vec![GapNotice::ScanTimeout { device }])
            }
            GapEvent::Deliver(d) => self.deliver(medium, queue, now, d),
        }
    }

    fn deliver<E: From<Delivery>>(
        &mut self,
        medium: &mut Medium,
        queue: &mut EventQueue<E>,
        now: TimeMs,
        d: Delivery,
    ) -> Result<Vec<GapNotice>, RadioError> {
        let from = d.frame.sender;
        let to = d.receiver;
        match d.frame.kind {
            FrameKind::AdvInd => {
                let Some(st) = self.stations.get(&to) else {
                    return Ok(vec![]);
                };
                let Some(scan) = st.scan.clone() else {
                    return Ok(vec![]);
                };
                let Some(adv) = AdvertisingData::decode(&d.frame.payload) else {
                    return Ok(vec![]);
                };
                let address = medium.address(from).ok_or(RadioError::UnknownDevice(from))?;
                let notices = vec![GapNotice::AdvSeen {
                    scanner: to,
                    advertiser: from,
                    address,
                    adv: adv.clone(),
                    rssi_dbm: d.rssi_dbm,
                }];
                if scan.auto_connect && adv.connectable && scan.filter.matches(address, &adv) {
                    let frame = Frame::new(
                        FrameKind::ConnectReq,
                        d.frame.channel,
                        Vec::new(),
                        to,
                        Some(from),
                        now,
                    )?;
                    medium.transmit(queue, frame)?;
                    let st = self.station(to)?;
                    st.scan = None;
                    st.scan_epoch += 1;
                    st.connecting = Some(from);
                }
                Ok(notices)
            }
            FrameKind::ConnectReq => {
                let central_waiting = self
                    .stations
                    .get(&from)
                    .is_some_and(|s| s.connecting == Some(to));
                if !central_waiting {
                    return Ok(vec![]);
                }
                let accept = self.stations.get(&to).is_some_and(|s| {
                    s.role == GapRole::Peripheral
                        && s.conn.is_none()
                        && s.adv.as_ref().is_some_and(|a| a.connectable)
                });
                self.station(from)?.connecting = None;
                if !accept {
                    return Ok(vec![GapNotice::ConnectFailed {
                        central: from,
                        peer: to,
                    }]);
                }
                self.next_conn += 1;
                let conn = ConnectionId(self.next_conn);
                self.connections.insert(
                    conn,
                    GapConnection {
                        central: from,
                        peripheral: to,
                        established_ms: now,
                    },
                );
                self.stop_advertising(to);
                self.station(to)?.conn = Some(conn);
                self.station(from)?.conn = Some(conn);
                Ok(vec![GapNotice::Connected {
                    conn,
                    central: from,
                    peripheral: to,
                }])
            }
            FrameKind::Data => Ok(self
                .link_between(to, from)
                .map(|conn| GapNotice::Data {
                    conn,
                    from,
                    to,
                    payload: d.frame.payload,
                    rssi_dbm: d.rssi_dbm,
                })
                .into_iter()
                .collect()),
            FrameKind::EchoReq => Ok(match (self.link_between(to, from), d.frame.payload.first()) {
                (Some(conn), Some(&id)) => vec![GapNotice::EchoRequest { conn, from, to, id }],
                _ => vec![],
            }),
            FrameKind::EchoRsp => {
                let (Some(conn), [id, status]) = (self.link_between(to, from), d.frame.payload.as_slice())
                else {
                    return Ok(vec![]);
                };
                let sent = self.pending_echo.remove(&(to, *id));
                Ok(vec![GapNotice::EchoResponse {
                    conn,
                    to,
                    id: *id,
                    status: *status,
                    rtt_ms: sent.map(|s| now - s),
                }])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{PathLossParams, RadioLink, RssiModel};
    use super::*;
    use crate::gatt::HEART_RATE_SERVICE;

    const P: DeviceId = DeviceId(1);
    const C: DeviceId = DeviceId(2);
    const C2: DeviceId = DeviceId(3);

    struct Bench {
        medium: Medium,
        gap: Gap,
        queue: EventQueue<GapEvent>,
        notices: Vec<(TimeMs, GapNotice)>,
    }

    impl Bench {
        fn new(devices: &[(DeviceId, GapRole)]) -> Bench {
            let mut medium = Medium::new(0);
            let mut gap = Gap::new();
            for (id, role) in devices {
                medium.add_device(*id, Address([0x10, 0, 0, 0, 0, id.0 as u8]), *role);
                gap.register(*id, *role);
            }
            for (i, (a, _)) in devices.iter().enumerate() {
                for (b, _) in &devices[i + 1..] {
                    medium
                        .add_link(RadioLink {
                            endpoint_a: *a,
                            endpoint_b: *b,
                            distance: 1.0,
                            model: RssiModel::Model(PathLossParams::new(1.0, -60.8, 0.0).unwrap()),
                            one_way_latency_ms: 5,
                        })
                        .unwrap();
                }
            }
            Bench {
                medium,
                gap,
                queue: EventQueue::new(),
                notices: Vec::new(),
            }
        }

        /// Runs until `until`, answering echo requests immediately.
        fn run(&mut self, until: TimeMs) {
            while self.queue.peek_time().is_some_and(|t| t <= until) {
                let (now, ev) = self.queue.pop().unwrap();
                let notices = self.gap.handle(&mut self.medium, &mut self.queue, now, ev).unwrap();
                for n in notices {
                    if let GapNotice::EchoRequest { to, id, .. } = n {
                        self.gap
                            .send_echo_response(&mut self.medium, &mut self.queue, to, id, 0, now)
                            .unwrap();
                    }
                    self.notices.push((now, n));
                }
            }
            self.queue.advance_to(until);
        }
    }

    fn adv(connectable: bool) -> AdvertisingData {
        AdvertisingData {
            connectable,
            name: "PolarSim H7".into(),
            services: vec![HEART_RATE_SERVICE],
        }
    }

    #[test]
    fn advertising_cycles_over_three_channels() {
        let mut b = Bench::new(&[(P, GapRole::Peripheral)]);
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.run(250);
        let trace: Vec<(TimeMs, u8)> = b
            .medium
            .records()
            .iter()
            .map(|r| (r.time_ms, r.channel))
            .collect();
        assert_eq!(
            trace,
            [
                (0, 37),
                (0, 38),
                (0, 39),
                (100, 37),
                (100, 38),
                (100, 39),
                (200, 37),
                (200, 38),
                (200, 39)
            ]
        );
        b.gap.stop_advertising(P);
        b.run(1000);
        assert_eq!(b.medium.record_count(), 9);
    }

    #[test]
    fn central_may_not_advertise() {
        let mut b = Bench::new(&[(C, GapRole::Central)]);
        assert!(matches!(
            b.gap.start_advertising(&mut b.queue, C, 100, &adv(true)),
            Err(RadioError::RoleViolation { .. })
        ));
    }

    #[test]
    fn connects_at_first_advertisement() {
        let mut b = Bench::new(&[(P, GapRole::Peripheral), (C, GapRole::Central)]);
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.run(50);
        b.gap
            .start_scan(&mut b.queue, C, ScanFilter::default(), Some(10_000), true)
            .unwrap();
        b.run(1000);
        let connected: Vec<_> = b
            .notices
            .iter()
            .filter(|(_, n)| matches!(n, GapNotice::Connected { .. }))
            .collect();
        assert_eq!(connected.len(), 1);
        // AdvInd at 100 reaches the central at 105; ConnectReq lands at 110.
        assert_eq!(connected[0].0, 110);
        assert!(!b.gap.is_advertising(P));
        let req = b
            .medium
            .records()
            .into_iter()
            .find(|r| r.kind == FrameKind::ConnectReq)
            .unwrap();
        assert_eq!((req.time_ms, req.channel), (105, 37));
    }

    #[test]
    fn scan_times_out_without_advertiser() {
        let mut b = Bench::new(&[(P, GapRole::Peripheral), (C, GapRole::Central)]);
        b.gap
            .start_scan(&mut b.queue, C, ScanFilter::default(), Some(500), true)
            .unwrap();
        b.run(1000);
        assert_eq!(b.notices, [(500, GapNotice::ScanTimeout { device: C })]);
    }

    #[test]
    fn racing_centrals_yield_one_connection() {
        let mut b = Bench::new(&[
            (P, GapRole::Peripheral),
            (C, GapRole::Central),
            (C2, GapRole::Central),
        ]);
        for c in [C, C2] {
            b.gap
                .start_scan(&mut b.queue, c, ScanFilter::default(), None, true)
                .unwrap();
        }
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.run(1000);
        let connected: Vec<_> = b
            .notices
            .iter()
            .filter_map(|(_, n)| match n {
                GapNotice::Connected { central, .. } => Some(*central),
                _ => None,
            })
            .collect();
        let failed: Vec<_> = b
            .notices
            .iter()
            .filter_map(|(_, n)| match n {
                GapNotice::ConnectFailed { central, .. } => Some(*central),
                _ => None,
            })
            .collect();
        // Equal latencies: the central scheduled first wins on event order.
        assert_eq!(connected, [C]);
        assert_eq!(failed, [C2]);
        // The loser re-scans and finds nothing more to connect to.
        b.gap
            .start_scan(&mut b.queue, C2, ScanFilter::default(), Some(300), true)
            .unwrap();
        b.run(2000);
        assert!(matches!(b.notices.last(), Some((_, GapNotice::ScanTimeout { device: C2 }))));
    }

    #[test]
    fn broadcaster_never_accepts_connections() {
        let mut b = Bench::new(&[(P, GapRole::Broadcaster), (C, GapRole::Central)]);
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.gap
            .start_scan(&mut b.queue, C, ScanFilter::default(), Some(350), true)
            .unwrap();
        b.run(400);
        assert!(b.medium.records().iter().all(|r| r.kind == FrameKind::AdvInd));
        let seen = b
            .notices
            .iter()
            .filter(|(_, n)| matches!(n, GapNotice::AdvSeen { adv, .. } if !adv.connectable))
            .count();
        assert!(seen > 0);

        // A ConnectReq forced onto the air is refused.
        b.gap.station(C).unwrap().connecting = Some(P);
        let f = Frame::new(FrameKind::ConnectReq, Channel::Adv37, vec![], C, Some(P), 400).unwrap();
        b.medium.transmit(&mut b.queue, f).unwrap();
        b.run(500);
        assert!(matches!(
            b.notices.last(),
            Some((_, GapNotice::ConnectFailed { central: C, peer: P }))
        ));
    }

    #[test]
    fn echo_round_trip() {
        let mut b = Bench::new(&[(P, GapRole::Peripheral), (C, GapRole::Central)]);
        assert_eq!(
            b.gap.send_echo_request(&mut b.medium, &mut b.queue, C, 1, 0),
            Err(RadioError::NotConnected)
        );
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.gap
            .start_scan(&mut b.queue, C, ScanFilter::default(), None, true)
            .unwrap();
        b.run(100);
        b.gap
            .send_echo_request(&mut b.medium, &mut b.queue, C, 7, 100)
            .unwrap();
        b.run(200);
        let rtt = b.notices.iter().find_map(|(_, n)| match n {
            GapNotice::EchoResponse { id: 7, rtt_ms, .. } => *rtt_ms,
            _ => None,
        });
        assert_eq!(rtt, Some(10));
    }

    #[test]
    fn data_after_disconnect_is_dropped() {
        let mut b = Bench::new(&[(P, GapRole::Peripheral), (C, GapRole::Central)]);
        b.gap.start_advertising(&mut b.queue, P, 100, &adv(true)).unwrap();
        b.gap
            .start_scan(&mut b.queue, C, ScanFilter::default(), None, true)
            .unwrap();
        b.run(100);
        let conn = b.gap.connection_of(C).unwrap();
        b.gap
            .send_data(&mut b.medium, &mut b.queue, C, vec![1], 100)
            .unwrap();
        b.gap.disconnect(conn);
        b.run(200);
        assert!(!b.notices.iter().any(|(_, n)| matches!(n, GapNotice::Data { .. })));
        assert_eq!(
            b.gap.send_data(&mut b.medium, &mut b.queue, C, vec![1], 200),
            Err(RadioError::NotConnected)
        );
    }
}
