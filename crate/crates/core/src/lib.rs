//! Reliable UDT-style transport over UDP with per-segment authentication,
//! first-packet identity, and a deterministic adversarial simulator.

pub mod auth;
pub mod checksum;
pub mod engine;
pub mod identity;
pub mod mux;
pub mod netsim;
pub mod seq;
pub mod udp_io;
pub mod wire;

pub use auth::{DigestAlgorithm, KeyMaterial, Password};
pub use engine::{Connection, ConnectionConfig, Datagram, Disposition, Listener, ListenerConfig, Phase};
pub use identity::{GuardPolicy, IdentityRecord};
pub use seq::SequenceNumber;
pub use wire::{ControlPacket, ControlType, Packet};
