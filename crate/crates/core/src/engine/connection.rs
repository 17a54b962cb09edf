use super::handshake::{HandshakeBody, HandshakeKind};
use super::loss::{decode_nak, encode_nak, LossList};
use super::{
    CloseReason, ConnectionConfig, ConnectionStats, Datagram, Disposition, EngineError, Handled, Phase, Role,
    MAX_SEND_PERIOD_US, MIN_SEND_PERIOD_US, RATE_EPOCH_US,
};
use crate::auth::{self, ConnectionKey, KeyMaterial};
use crate::identity::{build_identity_packet, IdentityRecord, NONCE_LEN};
use crate::seq::SequenceNumber;
use crate::wire::{
    decode_packet, encode_packet, peek_dest_socket_id, strip_ao_trailer_as, Boundary, ControlPacket, ControlType,
    DataPacketHeader, Packet, MAX_CONTROL_INFO, MAX_MESSAGE_NUMBER,
};
use rand::Rng;
use std::collections::{HashMap, HashSet, VecDeque};
use std::net::SocketAddrV4;

#[derive(Debug, Clone)]
struct OutPacket {
    boundary: Boundary,
    in_order: bool,
    message_number: u32,
    payload: Vec<u8>,
}

#[derive(Debug, Clone)]
struct InPacket {
    boundary: Boundary,
    in_order: bool,
    payload: Vec<u8>,
}

/// One end of a UDT association.
///
/// The sending half keeps every packet in `[snd_una, snd_next)`:
/// `[snd_una, snd_frontier)` has been transmitted and awaits acknowledgement,
/// `[snd_frontier, snd_next)` is queued. The receiving half tracks
/// `rcv_deliver` (next sequence owed to the application) and `rcv_expected`
/// (one past the highest sequence seen).
#[derive(Debug)]
pub struct Connection {
    cfg: ConnectionConfig,
    role: Role,
    phase: Phase,
    close_reason: Option<CloseReason>,
    local_addr: SocketAddrV4,
    peer_addr: SocketAddrV4,
    local_socket_id: u32,
    peer_socket_id: u32,
    local_cookie: [u8; 8],
    peer_cookie: [u8; 8],
    connection_key: ConnectionKey,
    key: Option<KeyMaterial>,
    start_us: u64,
    now_us: u64,
    opened_us: u64,
    identity: Option<IdentityRecord>,
    next_handshake_us: u64,

    initial_sequence: SequenceNumber,
    snd_una: SequenceNumber,
    snd_frontier: SequenceNumber,
    snd_next: SequenceNumber,
    send_queue: VecDeque<OutPacket>,
    sender_loss: LossList,
    flow_window: u32,
    next_message_number: u32,
    send_period_us: f64,
    next_send_us: f64,
    loss_in_epoch: bool,
    next_epoch_us: u64,
    last_ack_sub: Option<u32>,
    last_progress_us: u64,
    last_tx_us: u64,

    rcv_deliver: SequenceNumber,
    rcv_expected: SequenceNumber,
    receiver_loss: LossList,
    rcv_buf: HashMap<SequenceNumber, InPacket>,
    ooo_delivered: HashSet<SequenceNumber>,
    delivered: VecDeque<Vec<u8>>,
    ack_seq_next: u32,
    last_ack_point: Option<SequenceNumber>,
    data_since_ack: bool,
    next_ack_us: u64,
    next_nak_us: u64,
    last_rx_us: u64,
    last_ack2_sub: Option<u32>,

    stats: ConnectionStats,
}

impl Connection {
    #[allow(clippy::too_many_arguments)]
    fn blank(
        cfg: ConnectionConfig,
        role: Role,
        local_addr: SocketAddrV4,
        peer_addr: SocketAddrV4,
        local_socket_id: u32,
        local_cookie: [u8; 8],
        isn: SequenceNumber,
        now_us: u64,
    ) -> Self {
        let key = cfg.password.clone().map(|password| KeyMaterial {
            password,
            connection_key: ConnectionKey::partial(local_cookie),
        });
        Connection {
            role,
            phase: Phase::Idle,
            close_reason: None,
            local_addr,
            peer_addr,
            local_socket_id,
            peer_socket_id: 0,
            local_cookie,
            peer_cookie: [0; 8],
            connection_key: ConnectionKey::partial(local_cookie),
            key,
            start_us: now_us,
            now_us,
            opened_us: now_us,
            identity: None,
            next_handshake_us: now_us,
            initial_sequence: isn,
            snd_una: isn,
            snd_frontier: isn,
            snd_next: isn,
            send_queue: VecDeque::new(),
            sender_loss: LossList::new(),
            flow_window: cfg.flow_window,
            next_message_number: 0,
            send_period_us: cfg.initial_send_period_us.clamp(MIN_SEND_PERIOD_US, MAX_SEND_PERIOD_US),
            next_send_us: now_us as f64,
            loss_in_epoch: false,
            next_epoch_us: now_us + RATE_EPOCH_US,
            last_ack_sub: None,
            last_progress_us: now_us,
            last_tx_us: now_us,
            rcv_deliver: SequenceNumber::ZERO,
            rcv_expected: SequenceNumber::ZERO,
            receiver_loss: LossList::new(),
            rcv_buf: HashMap::new(),
            ooo_delivered: HashSet::new(),
            delivered: VecDeque::new(),
            ack_seq_next: 1,
            last_ack_point: None,
            data_since_ack: false,
            next_ack_us: now_us + cfg.ack_interval_us,
            next_nak_us: now_us + cfg.nak_interval_us,
            last_rx_us: now_us,
            last_ack2_sub: None,
            stats: ConnectionStats::default(),
            cfg,
        }
    }

    /// Starts an association as initiator.
    ///
    /// Returns the connection in `IdentitySent` together with the datagrams
    /// to transmit: the identity packet first (when a principal is
    /// configured), then the handshake request. The initiator's cookie is the
    /// first half of the identity nonce, so the receiver can derive the
    /// partial connection key from the very first packet.
    pub fn open<R: Rng + ?Sized>(
        cfg: ConnectionConfig,
        local: SocketAddrV4,
        peer: SocketAddrV4,
        now_us: u64,
        rng: &mut R,
    ) -> Result<(Connection, Vec<Datagram>), EngineError> {
        cfg.validate()?;
        let local_socket_id = rng.random_range(1..=u32::MAX);
        let isn = cfg
            .initial_sequence
            .unwrap_or_else(|| SequenceNumber::wrapping(rng.random::<u32>()));
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill(&mut nonce);
        let identity = match (&cfg.identity, &cfg.password) {
            (Some(principal), Some(password)) => Some(
                IdentityRecord::signed(
                    principal,
                    cfg.epoch_ms + now_us / 1000,
                    nonce,
                    cfg.identity_algorithm,
                    password,
                )
                .map_err(|_| EngineError::Config("principal must be 1..=255 bytes"))?,
            ),
            _ => None,
        };
        let cookie: [u8; 8] = nonce[..8].try_into().unwrap();
        let mut conn = Connection::blank(cfg, Role::Initiator, local, peer, local_socket_id, cookie, isn, now_us);
        conn.phase = Phase::IdentitySent;
        conn.identity = identity;
        let out = conn.handshake_burst();
        Ok((conn, out))
    }

    /// Creates the responder side for a verified handshake request and
    /// returns it with the handshake response.
    pub(crate) fn accept<R: Rng + ?Sized>(
        cfg: ConnectionConfig,
        local: SocketAddrV4,
        peer: SocketAddrV4,
        request: &HandshakeBody,
        now_us: u64,
        rng: &mut R,
    ) -> Result<(Connection, Datagram), EngineError> {
        cfg.validate()?;
        let local_socket_id = rng.random_range(1..=u32::MAX);
        let isn = cfg
            .initial_sequence
            .unwrap_or_else(|| SequenceNumber::wrapping(rng.random::<u32>()));
        let cookie: [u8; 8] = rng.random();
        let mut conn = Connection::blank(cfg, Role::Responder, local, peer, local_socket_id, cookie, isn, now_us);
        conn.peer_socket_id = request.socket_id;
        conn.peer_cookie = request.cookie;
        conn.set_connection_key(ConnectionKey::from_cookies(request.cookie, cookie));
        conn.enter_established(request.initial_sequence, request.flow_window);
        let response = conn.handshake_response();
        Ok((conn, response))
    }

    fn set_connection_key(&mut self, key: ConnectionKey) {
        self.connection_key = key;
        if let Some(k) = &mut self.key {
            k.connection_key = key;
        }
    }

    fn enter_established(&mut self, peer_isn: SequenceNumber, peer_window: u32) {
        self.phase = Phase::Established;
        self.rcv_deliver = peer_isn;
        self.rcv_expected = peer_isn;
        self.last_ack_point = Some(peer_isn);
        self.flow_window = peer_window;
        self.identity = None;
        let now = self.now_us;
        self.last_progress_us = now;
        self.last_rx_us = now;
        self.next_epoch_us = now + RATE_EPOCH_US;
        self.next_ack_us = now + self.cfg.ack_interval_us;
        self.next_nak_us = now + self.cfg.nak_interval_us;
        self.next_send_us = self.next_send_us.max(now as f64);
    }

    fn timestamp(&self) -> u32 {
        self.now_us.wrapping_sub(self.start_us) as u32
    }

    fn advance_clock(&mut self, now_us: u64) {
        self.now_us = self.now_us.max(now_us);
    }

    fn emit(&mut self, packet: &Packet) -> Datagram {
        let bytes = encode_packet(packet).expect("engine only builds in-range packets");
        let bytes = match (self.cfg.ao, &self.key) {
            (Some(alg), Some(key)) => auth::seal(alg, self.local_addr, self.peer_addr, bytes, key)
                .expect("segment fits in a UDP datagram"),
            _ => bytes,
        };
        self.stats.packets_sent += 1;
        self.last_tx_us = self.now_us;
        Datagram {
            src: self.local_addr,
            dst: self.peer_addr,
            bytes,
        }
    }

    fn control(&self, ctype: ControlType) -> ControlPacket {
        ControlPacket::new(ctype, self.peer_socket_id, self.timestamp())
    }

    fn handshake_burst(&mut self) -> Vec<Datagram> {
        let mut out = Vec::with_capacity(2);
        if let Some(record) = self.identity.clone() {
            let pkt = build_identity_packet(&record, self.timestamp());
            out.push(self.emit(&Packet::Control(pkt)));
        }
        let body = HandshakeBody {
            kind: HandshakeKind::Request,
            socket_id: self.local_socket_id,
            initial_sequence: self.initial_sequence,
            flow_window: self.cfg.flow_window,
            cookie: self.local_cookie,
            echoed_cookie: [0; 8],
        };
        let mut pkt = ControlPacket::new(ControlType::Handshake, 0, self.timestamp());
        pkt.control_info = body.to_bytes();
        out.push(self.emit(&Packet::Control(pkt)));
        self.next_handshake_us = self.now_us + self.cfg.handshake_retry_us;
        out
    }

    pub(crate) fn handshake_response(&mut self) -> Datagram {
        let body = HandshakeBody {
            kind: HandshakeKind::Response,
            socket_id: self.local_socket_id,
            initial_sequence: self.initial_sequence,
            flow_window: self.cfg.flow_window,
            cookie: self.local_cookie,
            echoed_cookie: self.peer_cookie,
        };
        let mut pkt = self.control(ControlType::Handshake);
        pkt.control_info = body.to_bytes();
        self.emit(&Packet::Control(pkt))
    }

    /// Resends the handshake response for a retried request.
    pub(crate) fn on_repeated_request(&mut self, now_us: u64) -> Datagram {
        self.advance_clock(now_us);
        self.last_rx_us = self.now_us;
        self.handshake_response()
    }

    /// Key for a handshake response received while still waiting for it:
    /// the responder's cookie is only learned from the response itself.
    fn response_key(&self, alg: auth::DigestAlgorithm, bytes: &[u8]) -> Option<KeyMaterial> {
        if self.role != Role::Initiator || self.phase != Phase::IdentitySent {
            return None;
        }
        let (packet, _) = strip_ao_trailer_as(bytes, alg).ok()?;
        let Packet::Control(c) = decode_packet(packet).ok()? else {
            return None;
        };
        if c.ctype != ControlType::Handshake {
            return None;
        }
        let body = HandshakeBody::from_bytes(&c.control_info).ok()?;
        if body.kind != HandshakeKind::Response {
            return None;
        }
        Some(KeyMaterial {
            password: self.key.as_ref()?.password.clone(),
            connection_key: ConnectionKey::from_cookies(self.local_cookie, body.cookie),
        })
    }

    pub fn handle_datagram(&mut self, now_us: u64, dgram: &Datagram) -> Handled {
        self.advance_clock(now_us);
        if self.phase == Phase::Closed {
            return Handled::silent(Disposition::Closed);
        }
        if dgram.src != self.peer_addr || peek_dest_socket_id(&dgram.bytes) != Some(self.local_socket_id) {
            return Handled::silent(Disposition::Unroutable);
        }
        let verified = match self.cfg.ao {
            Some(alg) => {
                let special = self.response_key(alg, &dgram.bytes);
                let key = special.as_ref().or(self.key.as_ref()).expect("validated: AO requires a key");
                auth::open(alg, dgram.src, dgram.dst, &dgram.bytes, key)
            }
            None => Ok(&dgram.bytes[..]),
        };
        let bytes = match verified {
            Ok(b) => b,
            Err(outcome) => {
                self.stats.dropped_auth += 1;
                let n = self.stats.dropped_auth;
                if n <= 10 || n.is_multiple_of(1000) {
                    log::warn!(
                        "dropped unauthenticated segment from {}: {:?} (dropped_auth={})",
                        dgram.src,
                        outcome.reason(),
                        n
                    );
                }
                return Handled::silent(Disposition::DroppedAuth(outcome.reason()));
            }
        };
        let packet = match decode_packet(bytes) {
            Ok(p) => p,
            Err(e) => {
                self.stats.dropped_malformed += 1;
                log::debug!("malformed packet from {}: {e}", dgram.src);
                return Handled::silent(Disposition::Malformed);
            }
        };
        self.stats.accepted += 1;
        self.last_rx_us = self.now_us;
        let mut out = Vec::new();
        let disposition = match packet {
            Packet::Data { header, payload } => self.on_data(header, payload, &mut out),
            Packet::Control(c) => match c.ctype {
                ControlType::Handshake => self.handle_handshake(&c),
                ControlType::Ack => self.on_ack(&c, &mut out),
                ControlType::Nak => self.on_nak(&c),
                ControlType::Ack2 => self.on_ack2(&c),
                ControlType::Keepalive => Disposition::Accepted,
                ControlType::Shutdown => {
                    self.phase = Phase::Closed;
                    self.close_reason = Some(CloseReason::PeerShutdown);
                    Disposition::Accepted
                }
                ControlType::UserDefined => Disposition::Ignored,
            },
        };
        if disposition == Disposition::Malformed {
            self.stats.accepted -= 1;
            self.stats.dropped_malformed += 1;
        }
        Handled { disposition, out }
    }

    fn handle_handshake(&mut self, c: &ControlPacket) -> Disposition {
        let Ok(body) = HandshakeBody::from_bytes(&c.control_info) else {
            return Disposition::Malformed;
        };
        match (self.role, self.phase, body.kind) {
            (Role::Initiator, Phase::IdentitySent, HandshakeKind::Response) if body.echoed_cookie == self.local_cookie => {
                self.peer_socket_id = body.socket_id;
                self.peer_cookie = body.cookie;
                self.set_connection_key(ConnectionKey::from_cookies(self.local_cookie, body.cookie));
                self.enter_established(body.initial_sequence, body.flow_window);
                log::debug!("connection {} established with {}", self.local_socket_id, self.peer_addr);
                Disposition::Accepted
            }
            (Role::Initiator, Phase::Established, HandshakeKind::Response) => Disposition::Duplicate,
            _ => Disposition::Ignored,
        }
    }

    fn on_data(&mut self, header: DataPacketHeader, payload: Vec<u8>, out: &mut Vec<Datagram>) -> Disposition {
        if self.phase != Phase::Established {
            return Disposition::Ignored;
        }
        let s = SequenceNumber::wrapping(header.sequence);
        if s.precedes(self.rcv_deliver) {
            return self.duplicate();
        }
        if s.offset_from(self.rcv_deliver) >= self.cfg.flow_window {
            self.stats.out_of_window += 1;
            return Disposition::Ignored;
        }
        if s == self.rcv_expected {
            self.rcv_expected = s.next();
        } else if self.rcv_expected.precedes(s) {
            let (first, last) = (self.rcv_expected, s.minus(1));
            self.receiver_loss.insert(first, last);
            let mut nak = self.control(ControlType::Nak);
            nak.control_info = encode_nak(&[(first, last)]);
            out.push(self.emit(&Packet::Control(nak)));
            self.stats.naks_sent += 1;
            self.rcv_expected = s.next();
        } else if !self.receiver_loss.remove(s) {
            return self.duplicate();
        }
        self.rcv_buf.insert(
            s,
            InPacket {
                boundary: header.boundary,
                in_order: header.in_order,
                payload,
            },
        );
        self.stats.data_accepted += 1;
        self.data_since_ack = true;
        if !header.in_order {
            self.deliver_unordered(s);
        }
        self.deliver_in_order();
        Disposition::Accepted
    }

    fn duplicate(&mut self) -> Disposition {
        self.stats.duplicates += 1;
        self.data_since_ack = true;
        Disposition::Duplicate
    }

    fn push_delivered(&mut self, message: Vec<u8>) {
        self.stats.delivered_messages += 1;
        self.stats.delivered_bytes += message.len() as u64;
        self.delivered.push_back(message);
    }

    fn take_run(&mut self, start: SequenceNumber, count: u32) -> Vec<u8> {
        let mut message = Vec::new();
        for i in 0..count {
            if let Some(p) = self.rcv_buf.remove(&start.plus(i)) {
                message.extend_from_slice(&p.payload);
            }
        }
        message
    }

    /// Delivers complete messages starting at `rcv_deliver`. Packets that
    /// cannot belong to a well-formed message are discarded and counted.
    fn deliver_in_order(&mut self) {
        loop {
            while self.ooo_delivered.remove(&self.rcv_deliver) {
                self.rcv_deliver = self.rcv_deliver.next();
            }
            let Some(first) = self.rcv_buf.get(&self.rcv_deliver) else {
                break;
            };
            if !first.boundary.starts_message() {
                self.rcv_buf.remove(&self.rcv_deliver);
                self.stats.reassembly_errors += 1;
                self.rcv_deliver = self.rcv_deliver.next();
                continue;
            }
            let mut len = 0u32;
            let mut complete = false;
            let mut broken = false;
            loop {
                let s = self.rcv_deliver.plus(len);
                let Some(p) = self.rcv_buf.get(&s) else { break };
                if len > 0 && (p.boundary.starts_message() || self.ooo_delivered.contains(&s)) {
                    broken = true;
                    break;
                }
                len += 1;
                if p.boundary.ends_message() {
                    complete = true;
                    break;
                }
            }
            if complete {
                let message = self.take_run(self.rcv_deliver, len);
                self.rcv_deliver = self.rcv_deliver.plus(len);
                self.push_delivered(message);
            } else if broken {
                self.take_run(self.rcv_deliver, len);
                self.stats.reassembly_errors += 1;
                self.rcv_deliver = self.rcv_deliver.plus(len);
            } else {
                break;
            }
        }
    }

    /// Delivers the message containing `s` ahead of earlier gaps when it is
    /// complete and was sent without the in-order flag.
    fn deliver_unordered(&mut self, s: SequenceNumber) {
        let mut start = s;
        loop {
            let Some(p) = self.rcv_buf.get(&start) else { return };
            if p.in_order {
                return;
            }
            if p.boundary.starts_message() {
                break;
            }
            if start == self.rcv_deliver {
                return;
            }
            start = start.minus(1);
        }
        if start == self.rcv_deliver {
            // The in-order pass handles it.
            return;
        }
        let mut len = 0u32;
        loop {
            let Some(p) = self.rcv_buf.get(&start.plus(len)) else { return };
            if len > 0 && p.boundary.starts_message() {
                return;
            }
            len += 1;
            if p.boundary.ends_message() {
                break;
            }
        }
        for i in 0..len {
            self.ooo_delivered.insert(start.plus(i));
        }
        let message = self.take_run(start, len);
        self.push_delivered(message);
    }

    fn on_ack(&mut self, c: &ControlPacket, out: &mut Vec<Datagram>) -> Disposition {
        if self.phase != Phase::Established {
            return Disposition::Ignored;
        }
        let sub = c.additional_info;
        if let Some(last) = self.last_ack_sub {
            if (sub.wrapping_sub(last) as i32) <= 0 {
                self.stats.stale_acks += 1;
                return Disposition::Ignored;
            }
        }
        if c.control_info.len() != 8 {
            return Disposition::Malformed;
        }
        let point = SequenceNumber::wrapping(u32::from_be_bytes(c.control_info[0..4].try_into().unwrap()));
        let window = u32::from_be_bytes(c.control_info[4..8].try_into().unwrap());
        if point.precedes(self.snd_una) || self.snd_frontier.precedes(point) {
            return Disposition::Ignored;
        }
        self.last_ack_sub = Some(sub);
        let acked = point.offset_from(self.snd_una);
        if acked > 0 {
            self.send_queue.drain(..acked as usize);
            self.snd_una = point;
            self.sender_loss.remove_before(point);
            self.last_progress_us = self.now_us;
        }
        self.flow_window = window;
        let mut ack2 = self.control(ControlType::Ack2);
        ack2.additional_info = sub;
        out.push(self.emit(&Packet::Control(ack2)));
        Disposition::Accepted
    }

    fn on_ack2(&mut self, c: &ControlPacket) -> Disposition {
        let sub = c.additional_info;
        match self.last_ack2_sub {
            Some(last) if (sub.wrapping_sub(last) as i32) <= 0 => Disposition::Ignored,
            _ => {
                self.last_ack2_sub = Some(sub);
                Disposition::Accepted
            }
        }
    }

    fn on_nak(&mut self, c: &ControlPacket) -> Disposition {
        if self.phase != Phase::Established {
            return Disposition::Ignored;
        }
        let Ok(ranges) = decode_nak(&c.control_info) else {
            return Disposition::Malformed;
        };
        let mut useful = false;
        for (first, last) in ranges {
            if self.snd_una == self.snd_frontier {
                self.stats.bogus_naks += 1;
                continue;
            }
            let last_sent = self.snd_frontier.minus(1);
            if last.precedes(self.snd_una) || last_sent.precedes(first) {
                self.stats.bogus_naks += 1;
                continue;
            }
            let lo = if first.precedes(self.snd_una) { self.snd_una } else { first };
            let hi = if last_sent.precedes(last) { last_sent } else { last };
            self.sender_loss.insert(lo, hi);
            useful = true;
        }
        if useful {
            self.loss_in_epoch = true;
            self.last_progress_us = self.now_us;
            Disposition::Accepted
        } else {
            Disposition::Ignored
        }
    }

    fn inflight(&self) -> u32 {
        self.snd_frontier.offset_from(self.snd_una)
    }

    fn has_sendable(&self) -> bool {
        !self.sender_loss.is_empty() || (self.snd_frontier != self.snd_next && self.inflight() < self.flow_window)
    }

    fn data_datagram(&mut self, seq: SequenceNumber) -> Datagram {
        let p = &self.send_queue[seq.offset_from(self.snd_una) as usize];
        let packet = Packet::Data {
            header: DataPacketHeader {
                sequence: seq.value(),
                boundary: p.boundary,
                in_order: p.in_order,
                message_number: p.message_number,
                timestamp_us: self.timestamp(),
                dest_socket_id: self.peer_socket_id,
            },
            payload: p.payload.clone(),
        };
        self.emit(&packet)
    }

    /// Emits at most one data packet per elapsed send period, retransmissions
    /// first.
    fn pump(&mut self) -> Vec<Datagram> {
        let mut out = Vec::new();
        if self.phase != Phase::Established {
            return out;
        }
        let now = self.now_us as f64;
        while self.next_send_us <= now {
            if let Some(seq) = self.sender_loss.pop_first() {
                if seq.precedes(self.snd_una) || !seq.precedes(self.snd_frontier) {
                    continue;
                }
                let d = self.data_datagram(seq);
                self.stats.retransmitted += 1;
                out.push(d);
            } else if self.snd_frontier != self.snd_next && self.inflight() < self.flow_window {
                let seq = self.snd_frontier;
                let d = self.data_datagram(seq);
                self.snd_frontier = seq.next();
                self.stats.data_packets_sent += 1;
                out.push(d);
            } else {
                break;
            }
            self.next_send_us += self.send_period_us;
        }
        if self.next_send_us < now {
            self.next_send_us = now;
        }
        out
    }

    /// Queues one application message and returns whatever the pacer
    /// releases immediately.
    pub fn send_message(&mut self, payload: &[u8], in_order: bool) -> Result<Vec<Datagram>, EngineError> {
        if self.phase == Phase::Closed {
            return Err(EngineError::ConnectionClosed);
        }
        let message_number = self.next_message_number;
        self.next_message_number = (message_number + 1) & MAX_MESSAGE_NUMBER;
        let chunks: Vec<&[u8]> = if payload.is_empty() {
            vec![payload]
        } else {
            payload.chunks(self.cfg.max_payload).collect()
        };
        let n = chunks.len();
        for (i, chunk) in chunks.into_iter().enumerate() {
            let boundary = match (i == 0, i + 1 == n) {
                (true, true) => Boundary::Solo,
                (true, false) => Boundary::First,
                (false, true) => Boundary::Last,
                (false, false) => Boundary::Middle,
            };
            self.send_queue.push_back(OutPacket {
                boundary,
                in_order,
                message_number,
                payload: chunk.to_vec(),
            });
            self.snd_next = self.snd_next.next();
        }
        Ok(self.pump())
    }

    fn ack_point(&self) -> SequenceNumber {
        self.receiver_loss.first().unwrap_or(self.rcv_expected)
    }

    fn advertised_window(&self) -> u32 {
        self.cfg.flow_window.saturating_sub(self.rcv_buf.len() as u32)
    }

    fn emit_ack(&mut self) -> Datagram {
        let point = self.ack_point();
        let mut ack = self.control(ControlType::Ack);
        ack.additional_info = self.ack_seq_next;
        self.ack_seq_next = self.ack_seq_next.wrapping_add(1);
        let mut body = Vec::with_capacity(8);
        body.extend_from_slice(&point.value().to_be_bytes());
        body.extend_from_slice(&self.advertised_window().to_be_bytes());
        ack.control_info = body;
        self.last_ack_point = Some(point);
        self.data_since_ack = false;
        self.stats.acks_sent += 1;
        self.emit(&Packet::Control(ack))
    }

    fn emit_loss_report(&mut self) -> Datagram {
        let max_ranges = MAX_CONTROL_INFO / 8;
        let ranges: Vec<_> = self.receiver_loss.ranges().iter().take(max_ranges).copied().collect();
        let mut nak = self.control(ControlType::Nak);
        nak.control_info = encode_nak(&ranges);
        self.stats.naks_sent += 1;
        self.emit(&Packet::Control(nak))
    }

    /// Advances timers to `now_us` and returns every datagram that became due.
    pub fn tick(&mut self, now_us: u64) -> Vec<Datagram> {
        self.advance_clock(now_us);
        let now = self.now_us;
        let mut out = Vec::new();
        match self.phase {
            Phase::Idle | Phase::Closed => return out,
            Phase::IdentitySent => {
                if now.saturating_sub(self.opened_us) >= self.cfg.connect_timeout_us {
                    self.phase = Phase::Closed;
                    self.close_reason = Some(CloseReason::ConnectTimeout);
                } else if now >= self.next_handshake_us {
                    out = self.handshake_burst();
                }
                return out;
            }
            Phase::Established => {}
        }
        if now.saturating_sub(self.last_rx_us) >= self.cfg.idle_timeout_us {
            self.phase = Phase::Closed;
            self.close_reason = Some(CloseReason::PeerTimeout);
            return out;
        }
        while now >= self.next_epoch_us {
            self.send_period_us = if self.loss_in_epoch {
                self.send_period_us * 1.25
            } else {
                self.send_period_us * 0.875
            }
            .clamp(MIN_SEND_PERIOD_US, MAX_SEND_PERIOD_US);
            self.loss_in_epoch = false;
            self.next_epoch_us += RATE_EPOCH_US;
        }
        if self.inflight() > 0 && now.saturating_sub(self.last_progress_us) >= self.cfg.rto_us {
            self.sender_loss.insert(self.snd_una, self.snd_frontier.minus(1));
            self.loss_in_epoch = true;
            self.last_progress_us = now;
            self.stats.exp_events += 1;
        }
        if now >= self.next_ack_us {
            self.next_ack_us = now + self.cfg.ack_interval_us;
            if self.data_since_ack || self.last_ack_point != Some(self.ack_point()) {
                out.push(self.emit_ack());
            }
        }
        if now >= self.next_nak_us {
            self.next_nak_us = now + self.cfg.nak_interval_us;
            if !self.receiver_loss.is_empty() {
                out.push(self.emit_loss_report());
            }
        }
        out.extend(self.pump());
        if now.saturating_sub(self.last_tx_us) >= self.cfg.keepalive_us {
            let ka = self.control(ControlType::Keepalive);
            out.push(self.emit(&Packet::Control(ka)));
            self.stats.keepalives_sent += 1;
        }
        out
    }

    /// Earliest time at which [`tick`](Self::tick) has work to do.
    pub fn next_wakeup(&self) -> u64 {
        match self.phase {
            Phase::Idle | Phase::Closed => u64::MAX,
            Phase::IdentitySent => self
                .next_handshake_us
                .min(self.opened_us + self.cfg.connect_timeout_us),
            Phase::Established => {
                let mut t = self
                    .next_ack_us
                    .min(self.next_epoch_us)
                    .min(self.last_rx_us + self.cfg.idle_timeout_us)
                    .min(self.last_tx_us + self.cfg.keepalive_us);
                if self.has_sendable() {
                    t = t.min(self.next_send_us.ceil() as u64);
                }
                if !self.receiver_loss.is_empty() {
                    t = t.min(self.next_nak_us);
                }
                if self.inflight() > 0 {
                    t = t.min(self.last_progress_us + self.cfg.rto_us);
                }
                t.max(self.now_us)
            }
        }
    }

    /// Sends a shutdown once and moves to `Closed`.
    pub fn close(&mut self) -> Vec<Datagram> {
        match self.phase {
            Phase::Closed => Vec::new(),
            Phase::Established => {
                let pkt = self.control(ControlType::Shutdown);
                let d = self.emit(&Packet::Control(pkt));
                self.phase = Phase::Closed;
                self.close_reason = Some(CloseReason::Local);
                vec![d]
            }
            Phase::Idle | Phase::IdentitySent => {
                self.phase = Phase::Closed;
                self.close_reason = Some(CloseReason::Local);
                Vec::new()
            }
        }
    }

    pub fn recv_message(&mut self) -> Option<Vec<u8>> {
        self.delivered.pop_front()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn close_reason(&self) -> Option<CloseReason> {
        self.close_reason
    }

    pub fn stats(&self) -> &ConnectionStats {
        &self.stats
    }

    pub fn local_socket_id(&self) -> u32 {
        self.local_socket_id
    }

    pub fn peer_socket_id(&self) -> u32 {
        self.peer_socket_id
    }

    pub fn local_addr(&self) -> SocketAddrV4 {
        self.local_addr
    }

    pub fn peer_addr(&self) -> SocketAddrV4 {
        self.peer_addr
    }

    pub fn local_cookie(&self) -> [u8; 8] {
        self.local_cookie
    }

    pub fn peer_cookie(&self) -> [u8; 8] {
        self.peer_cookie
    }

    pub fn connection_key(&self) -> ConnectionKey {
        self.connection_key
    }

    pub fn initial_sequence(&self) -> SequenceNumber {
        self.initial_sequence
    }

    /// Next sequence number a new packet will take.
    pub fn snd_next(&self) -> SequenceNumber {
        self.snd_next
    }

    pub fn snd_una(&self) -> SequenceNumber {
        self.snd_una
    }

    /// Packets transmitted and not yet acknowledged.
    pub fn inflight_packets(&self) -> u32 {
        self.inflight()
    }

    /// Packets queued but never transmitted.
    pub fn queued_packets(&self) -> u32 {
        self.snd_next.offset_from(self.snd_frontier)
    }

    /// True once every queued packet has been acknowledged.
    pub fn all_acknowledged(&self) -> bool {
        self.snd_una == self.snd_next
    }

    pub fn flow_window(&self) -> u32 {
        self.flow_window
    }

    pub fn send_period_us(&self) -> f64 {
        self.send_period_us
    }

    pub fn rcv_expected(&self) -> SequenceNumber {
        self.rcv_expected
    }

    pub fn sender_loss_list(&self) -> &LossList {
        &self.sender_loss
    }

    pub fn receiver_loss_list(&self) -> &LossList {
        &self.receiver_loss
    }

    pub fn config(&self) -> &ConnectionConfig {
        &self.cfg
    }

    /// Checks the bookkeeping invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<(), String> {
        for s in self.sender_loss.iter() {
            if s.precedes(self.snd_una) || !s.precedes(self.snd_frontier) {
                return Err(format!("sender loss entry {s:?} outside [{:?}, {:?})", self.snd_una, self.snd_frontier));
            }
        }
        for s in self.receiver_loss.iter() {
            if s.precedes(self.rcv_deliver) || self.rcv_buf.contains_key(&s) || self.ooo_delivered.contains(&s) {
                return Err(format!("receiver loss entry {s:?} already received"));
            }
        }
        if self.send_queue.len() as u32 != self.snd_next.offset_from(self.snd_una) {
            return Err("send queue length out of sync".into());
        }
        Ok(())
    }
}
