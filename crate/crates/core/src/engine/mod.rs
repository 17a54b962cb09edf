//! Per-connection UDT state machine and the accepting listener.
//!
//! The engine never performs I/O and never blocks. Callers feed it events
//! (a datagram arrived, the clock advanced, the application sent or closed)
//! one at a time with a monotonic microsecond clock, and it returns the
//! datagrams to put on the wire. The same event interface is driven by the
//! in-process simulator and by the real UDP adapter.

mod connection;
mod handshake;
mod listener;
mod loss;
#[cfg(test)]
mod tests;

pub use connection::Connection;
pub use handshake::{HandshakeBody, HandshakeError, HandshakeKind, HANDSHAKE_BODY_LEN};
pub use listener::{Listener, ListenerConfig, ListenerStats, RejectReason, RejectionBreakdown};
pub use loss::{decode_nak, encode_nak, LossList, NakError};

use crate::auth::{DigestAlgorithm, Password, VerifyReason};
use crate::seq::SequenceNumber;
use serde::Serialize;
use std::net::SocketAddrV4;
use thiserror::Error;

/// Largest application payload per data packet.
pub const MAX_PAYLOAD: usize = 1368;
/// Rate-control epoch length.
pub const RATE_EPOCH_US: u64 = 10_000;
pub const MIN_SEND_PERIOD_US: f64 = 100.0;
pub const MAX_SEND_PERIOD_US: f64 = 100_000.0;

/// One UDP datagram as seen on a flow.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Datagram {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ConnectionConfig {
    /// Shared secret for AO digests and identity signatures.
    pub password: Option<Password>,
    /// AO is enabled iff an algorithm is set.
    pub ao: Option<DigestAlgorithm>,
    /// Principal announced in the first packet, if any.
    pub identity: Option<String>,
    pub identity_algorithm: DigestAlgorithm,
    /// Receive capacity in packets, advertised as the flow window.
    pub flow_window: u32,
    pub max_payload: usize,
    pub initial_send_period_us: f64,
    pub ack_interval_us: u64,
    pub nak_interval_us: u64,
    pub keepalive_us: u64,
    pub rto_us: u64,
    pub handshake_retry_us: u64,
    pub connect_timeout_us: u64,
    pub idle_timeout_us: u64,
    /// Wall-clock milliseconds at engine time zero; stamps identity records.
    pub epoch_ms: u64,
    /// Fixed initial send sequence instead of a random one.
    pub initial_sequence: Option<SequenceNumber>,
}

impl Default for ConnectionConfig {
    fn default() -> Self {
        ConnectionConfig {
            password: None,
            ao: None,
            identity: None,
            identity_algorithm: DigestAlgorithm::Sha256,
            flow_window: 8192,
            max_payload: MAX_PAYLOAD,
            initial_send_period_us: 1000.0,
            ack_interval_us: 10_000,
            nak_interval_us: 40_000,
            keepalive_us: 1_000_000,
            rto_us: 300_000,
            handshake_retry_us: 250_000,
            connect_timeout_us: 10_000_000,
            idle_timeout_us: 10_000_000,
            epoch_ms: 0,
            initial_sequence: None,
        }
    }
}

impl ConnectionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.ao.is_some() && self.password.is_none() {
            return Err(EngineError::Config("AO enabled but no key configured"));
        }
        if self.identity.is_some() && self.password.is_none() {
            return Err(EngineError::Config("identity requires a key to sign with"));
        }
        if self.max_payload == 0 || self.max_payload > MAX_PAYLOAD {
            return Err(EngineError::Config("max_payload must be 1..=1368"));
        }
        if self.flow_window == 0 {
            return Err(EngineError::Config("flow_window must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(&'static str),
    #[error("connection is closed")]
    ConnectionClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Idle,
    IdentitySent,
    Established,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CloseReason {
    Local,
    PeerShutdown,
    ConnectTimeout,
    PeerTimeout,
}

/// What happened to one inbound datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Disposition {
    /// Passed authentication and changed connection state.
    Accepted,
    /// Authentic data already received or delivered.
    Duplicate,
    /// Failed AO verification; nothing was sent back.
    DroppedAuth(VerifyReason),
    Malformed,
    /// Authentic but not actionable (stale ACK, NAK for unsent data, ...).
    Ignored,
    /// Refused before any connection state existed.
    Rejected(RejectReason),
    /// No connection owns the destination socket id.
    Unroutable,
    /// The connection is already closed.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handled {
    pub disposition: Disposition,
    /// Datagrams sent in direct response.
    pub out: Vec<Datagram>,
}

impl Handled {
    pub fn silent(disposition: Disposition) -> Self {
        Handled {
            disposition,
            out: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConnectionStats {
    pub packets_sent: u64,
    pub data_packets_sent: u64,
    pub retransmitted: u64,
    pub accepted: u64,
    pub data_accepted: u64,
    pub dropped_auth: u64,
    pub dropped_malformed: u64,
    pub duplicates: u64,
    pub out_of_window: u64,
    pub bogus_naks: u64,
    pub stale_acks: u64,
    pub acks_sent: u64,
    pub naks_sent: u64,
    pub keepalives_sent: u64,
    pub exp_events: u64,
    pub delivered_messages: u64,
    pub delivered_bytes: u64,
    pub reassembly_errors: u64,
}
