use super::handshake::{HandshakeBody, HandshakeKind};
use super::{Connection, ConnectionConfig, Datagram, Disposition, EngineError, Handled};
use crate::auth::{self, ConnectionKey, KeyMaterial};
use crate::identity::{guard_decide, parse_identity_packet, GuardPolicy, GuardReason, NONCE_LEN};
use crate::mux::{multiplex_dispatch, Route};
use crate::wire::{decode_packet, strip_ao_trailer_as, ControlType, Packet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddrV4;

/// Why a connection-opening packet was refused before any state existed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RejectReason {
    BadSignature,
    UnknownPrincipal,
    StaleTimestamp,
    ReplayedNonce,
    Malformed,
    /// Handshake without a prior accepted identity on an identity-gated listener.
    MissingIdentity,
    /// AO trailer missing or wrong.
    AuthFailed,
}

impl From<GuardReason> for RejectReason {
    fn from(r: GuardReason) -> Self {
        match r {
            GuardReason::BadSignature => RejectReason::BadSignature,
            GuardReason::UnknownPrincipal => RejectReason::UnknownPrincipal,
            GuardReason::StaleTimestamp => RejectReason::StaleTimestamp,
            GuardReason::ReplayedNonce => RejectReason::ReplayedNonce,
            GuardReason::Ok | GuardReason::Malformed => RejectReason::Malformed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ListenerConfig {
    /// Template for every accepted connection.
    pub connection: ConnectionConfig,
    pub require_identity: bool,
    pub guard: GuardPolicy,
    /// How long an accepted identity admits a matching handshake.
    pub admission_ttl_us: u64,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        ListenerConfig {
            connection: ConnectionConfig::default(),
            require_identity: false,
            guard: GuardPolicy::allow_all(),
            admission_ttl_us: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RejectionBreakdown {
    pub bad_signature: u64,
    pub unknown_principal: u64,
    pub stale_timestamp: u64,
    pub replayed_nonce: u64,
    pub malformed: u64,
    pub missing_identity: u64,
    pub auth_failed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ListenerStats {
    pub connections_allocated: u64,
    pub guard_accepts: u64,
    /// Every refusal on the pre-state path, whatever the reason.
    pub guard_rejections: u64,
    pub rejections: RejectionBreakdown,
    pub duplicate_identities: u64,
    pub handshake_retries: u64,
    pub unroutable: u64,
    pub admissions_live: u64,
}

#[derive(Debug, Clone)]
struct Admission {
    nonce: [u8; NONCE_LEN],
    expires_us: u64,
}

/// Accepts associations on one local endpoint and owns the resulting
/// connections. All packets for unknown socket ids go through the guard
/// path, which allocates nothing until a handshake is admitted.
#[derive(Debug)]
pub struct Listener {
    cfg: ListenerConfig,
    rng: ChaCha8Rng,
    connections: BTreeMap<u32, Connection>,
    by_peer: HashMap<(SocketAddrV4, u32), u32>,
    admissions: HashMap<(SocketAddrV4, [u8; 8]), Admission>,
    admission_order: VecDeque<(SocketAddrV4, [u8; 8])>,
    admission_capacity: usize,
    newly_accepted: VecDeque<u32>,
    stats: ListenerStats,
}

impl Listener {
    pub fn new(cfg: ListenerConfig, seed: u64) -> Result<Self, EngineError> {
        cfg.connection.validate()?;
        if cfg.require_identity && cfg.connection.password.is_none() {
            return Err(EngineError::Config("require_identity needs a key to verify identities"));
        }
        let admission_capacity = cfg.guard.seen_nonces.capacity();
        Ok(Listener {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            connections: BTreeMap::new(),
            by_peer: HashMap::new(),
            admissions: HashMap::new(),
            admission_order: VecDeque::new(),
            admission_capacity,
            newly_accepted: VecDeque::new(),
            stats: ListenerStats::default(),
        })
    }

    pub fn stats(&self) -> ListenerStats {
        let mut s = self.stats.clone();
        s.admissions_live = self.admissions.len() as u64;
        s
    }

    pub fn config(&self) -> &ListenerConfig {
        &self.cfg
    }

    pub fn guard(&self) -> &GuardPolicy {
        &self.cfg.guard
    }

    /// Number of connection states currently held.
    pub fn connection_count(&self) -> usize {
        self.connections.len()
    }

    pub fn connection(&self, id: u32) -> Option<&Connection> {
        self.connections.get(&id)
    }

    pub fn connection_mut(&mut self, id: u32) -> Option<&mut Connection> {
        self.connections.get_mut(&id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &Connection> {
        self.connections.values()
    }

    /// Pops the id of the next connection accepted since the last call.
    pub fn accept(&mut self) -> Option<u32> {
        self.newly_accepted.pop_front()
    }

    /// Drops a connection's state, returning it.
    pub fn remove(&mut self, id: u32) -> Option<Connection> {
        let conn = self.connections.remove(&id)?;
        self.by_peer.remove(&(conn.peer_addr(), conn.peer_socket_id()));
        Some(conn)
    }

    pub fn handle_datagram(&mut self, now_us: u64, dgram: &Datagram) -> Handled {
        let route = multiplex_dispatch(&dgram.bytes, |id| self.connections.contains_key(&id));
        match route {
            Route::Connection(id) => self
                .connections
                .get_mut(&id)
                .expect("routed to a live id")
                .handle_datagram(now_us, dgram),
            Route::Guard => self.pre_state(now_us, dgram),
            Route::Drop => {
                self.stats.unroutable += 1;
                Handled::silent(Disposition::Unroutable)
            }
        }
    }

    fn reject(&mut self, reason: RejectReason, from: SocketAddrV4) -> Handled {
        self.stats.guard_rejections += 1;
        let b = &mut self.stats.rejections;
        match reason {
            RejectReason::BadSignature => b.bad_signature += 1,
            RejectReason::UnknownPrincipal => b.unknown_principal += 1,
            RejectReason::StaleTimestamp => b.stale_timestamp += 1,
            RejectReason::ReplayedNonce => b.replayed_nonce += 1,
            RejectReason::Malformed => b.malformed += 1,
            RejectReason::MissingIdentity => b.missing_identity += 1,
            RejectReason::AuthFailed => b.auth_failed += 1,
        }
        let n = self.stats.guard_rejections;
        if n <= 10 || n.is_multiple_of(1000) {
            log::warn!("refused connection attempt from {from}: {reason:?} (guard_rejections={n})");
        }
        Handled::silent(Disposition::Rejected(reason))
    }

    fn ao_ok(&self, dgram: &Datagram, initiator_cookie: [u8; 8]) -> bool {
        let (Some(alg), Some(password)) = (self.cfg.connection.ao, &self.cfg.connection.password) else {
            return true;
        };
        let key = KeyMaterial {
            password: password.clone(),
            connection_key: ConnectionKey::partial(initiator_cookie),
        };
        auth::open(alg, dgram.src, dgram.dst, &dgram.bytes, &key).is_ok()
    }

    fn pre_state(&mut self, now_us: u64, dgram: &Datagram) -> Handled {
        let bare = match self.cfg.connection.ao {
            Some(alg) => match strip_ao_trailer_as(&dgram.bytes, alg) {
                Ok((p, _)) => p,
                Err(_) => return self.reject(RejectReason::AuthFailed, dgram.src),
            },
            None => &dgram.bytes[..],
        };
        let Ok(Packet::Control(c)) = decode_packet(bare) else {
            return self.reject(RejectReason::Malformed, dgram.src);
        };
        if c.is_identity() {
            let Ok(record) = parse_identity_packet(&c) else {
                return self.reject(RejectReason::Malformed, dgram.src);
            };
            if !self.ao_ok(dgram, record.cookie()) {
                return self.reject(RejectReason::AuthFailed, dgram.src);
            }
            let slot = (dgram.src, record.cookie());
            if self.admissions.get(&slot).is_some_and(|a| a.nonce == record.nonce) {
                self.stats.duplicate_identities += 1;
                return Handled::silent(Disposition::Duplicate);
            }
            let Some(password) = &self.cfg.connection.password else {
                return Handled::silent(Disposition::Ignored);
            };
            let now_ms = self.cfg.connection.epoch_ms + now_us / 1000;
            let decision = guard_decide(&record, &mut self.cfg.guard, password, now_ms);
            if !decision.is_accept() {
                return self.reject(decision.reason.into(), dgram.src);
            }
            self.stats.guard_accepts += 1;
            log::info!("guard accepted principal {:?} from {}", record.principal, dgram.src);
            self.admit(
                slot,
                Admission {
                    nonce: record.nonce,
                    expires_us: now_us + self.cfg.admission_ttl_us,
                },
                now_us,
            );
            return Handled::silent(Disposition::Accepted);
        }
        if c.ctype != ControlType::Handshake {
            return self.reject(RejectReason::Malformed, dgram.src);
        }
        let body = match HandshakeBody::from_bytes(&c.control_info) {
            Ok(b) if b.kind == HandshakeKind::Request => b,
            _ => return self.reject(RejectReason::Malformed, dgram.src),
        };
        if !self.ao_ok(dgram, body.cookie) {
            return self.reject(RejectReason::AuthFailed, dgram.src);
        }
        if let Some(&id) = self.by_peer.get(&(dgram.src, body.socket_id)) {
            self.stats.handshake_retries += 1;
            let conn = self.connections.get_mut(&id).expect("index in sync");
            let response = conn.on_repeated_request(now_us);
            return Handled {
                disposition: Disposition::Duplicate,
                out: vec![response],
            };
        }
        if self.cfg.require_identity {
            let admitted = self
                .admissions
                .get(&(dgram.src, body.cookie))
                .is_some_and(|a| a.expires_us > now_us);
            if !admitted {
                return self.reject(RejectReason::MissingIdentity, dgram.src);
            }
        }
        let (conn, response) = loop {
            let (conn, response) =
                Connection::accept(self.cfg.connection.clone(), dgram.dst, dgram.src, &body, now_us, &mut self.rng)
                    .expect("template validated at construction");
            if !self.connections.contains_key(&conn.local_socket_id()) {
                break (conn, response);
            }
        };
        let id = conn.local_socket_id();
        self.stats.connections_allocated += 1;
        log::debug!("accepted connection {id} from {}", dgram.src);
        self.by_peer.insert((dgram.src, body.socket_id), id);
        self.connections.insert(id, conn);
        self.newly_accepted.push_back(id);
        Handled {
            disposition: Disposition::Accepted,
            out: vec![response],
        }
    }

    fn admit(&mut self, slot: (SocketAddrV4, [u8; 8]), admission: Admission, now_us: u64) {
        self.expire_admissions(now_us);
        while self.admissions.len() >= self.admission_capacity {
            match self.admission_order.pop_front() {
                Some(old) => {
                    self.admissions.remove(&old);
                }
                None => break,
            }
        }
        if self.admissions.insert(slot, admission).is_none() {
            self.admission_order.push_back(slot);
        }
    }

    fn expire_admissions(&mut self, now_us: u64) {
        while let Some(front) = self.admission_order.front() {
            match self.admissions.get(front) {
                Some(a) if a.expires_us > now_us => break,
                _ => {
                    let old = self.admission_order.pop_front().unwrap();
                    self.admissions.remove(&old);
                }
            }
        }
    }

    /// Ticks every connection.
    pub fn tick(&mut self, now_us: u64) -> Vec<Datagram> {
        self.expire_admissions(now_us);
        let mut out = Vec::new();
        for conn in self.connections.values_mut() {
            out.extend(conn.tick(now_us));
        }
        out
    }

    pub fn next_wakeup(&self) -> u64 {
        let conns = self.connections.values().map(Connection::next_wakeup).min();
        let adm = self
            .admission_order
            .front()
            .and_then(|s| self.admissions.get(s))
            .map(|a| a.expires_us);
        conns.into_iter().chain(adm).min().unwrap_or(u64::MAX)
    }
}
