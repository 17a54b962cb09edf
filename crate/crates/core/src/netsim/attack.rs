use crate::auth::DigestAlgorithm;
use crate::engine::{Datagram, HandshakeBody, HandshakeKind};
use crate::identity::{build_identity_packet, IdentityRecord, NONCE_LEN};
use crate::seq::{SequenceNumber, MAX_SEQ};
use crate::wire::{append_ao_trailer, encode_packet, AoTrailer, Boundary, ControlPacket, ControlType, DataPacketHeader, Packet};
use rand::Rng;
use serde::Serialize;
use std::net::{Ipv4Addr, SocketAddrV4};

/// What the injector knows. It never holds key material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpoofProfile {
    /// Always true for an on-path observer; kept for reporting.
    pub knows_addresses: bool,
    /// Use the receiver's next expected sequence instead of a random one.
    pub knows_sequence: bool,
    pub rate_per_sec: u64,
    pub payload: Vec<u8>,
}

impl Default for SpoofProfile {
    fn default() -> Self {
        SpoofProfile {
            knows_addresses: true,
            knows_sequence: true,
            rate_per_sec: 100_000,
            payload: b"spoofed segment".to_vec(),
        }
    }
}

/// Flow details visible to an observer of the sender-to-receiver path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedFlow {
    pub sender: SocketAddrV4,
    pub receiver: SocketAddrV4,
    pub receiver_socket_id: u32,
    pub expected_sequence: SequenceNumber,
}

fn junk_trailer<R: Rng + ?Sized>(bytes: Vec<u8>, ao: Option<DigestAlgorithm>, rng: &mut R) -> Vec<u8> {
    match ao {
        Some(algorithm) => {
            let mut digest = vec![0u8; algorithm.output_len()];
            rng.fill(&mut digest[..]);
            append_ao_trailer(bytes, &AoTrailer { algorithm, digest })
        }
        None => bytes,
    }
}

/// Forges one data segment impersonating the sender. When the receiver
/// expects AO framing the trailer is filled with random bytes.
pub fn inject_spoof<R: Rng + ?Sized>(
    profile: &SpoofProfile,
    flow: &ObservedFlow,
    ao: Option<DigestAlgorithm>,
    now_us: u64,
    rng: &mut R,
) -> Datagram {
    let sequence = if profile.knows_sequence {
        flow.expected_sequence.value()
    } else {
        rng.random_range(0..=MAX_SEQ)
    };
    let packet = Packet::Data {
        header: DataPacketHeader {
            sequence,
            boundary: Boundary::Solo,
            in_order: true,
            message_number: rng.random_range(0..=crate::wire::MAX_MESSAGE_NUMBER),
            timestamp_us: now_us as u32,
            dest_socket_id: flow.receiver_socket_id,
        },
        payload: profile.payload.clone(),
    };
    let bytes = encode_packet(&packet).expect("spoof payload fits a packet");
    Datagram {
        src: flow.sender,
        dst: flow.receiver,
        bytes: junk_trailer(bytes, ao, rng),
    }
}

/// Forges the `index`-th connection attempt of a flood from a fresh source
/// address: even attempts are bare handshake requests, odd ones carry an
/// identity record with a random signature.
pub fn forge_connection_attempt<R: Rng + ?Sized>(
    index: u64,
    target: SocketAddrV4,
    ao: Option<DigestAlgorithm>,
    now_ms: u64,
    rng: &mut R,
) -> Datagram {
    let src = SocketAddrV4::new(
        Ipv4Addr::new(198, 18, (index >> 8) as u8, index as u8),
        rng.random_range(1024..=u16::MAX),
    );
    let packet = if index.is_multiple_of(2) {
        let body = HandshakeBody {
            kind: HandshakeKind::Request,
            socket_id: rng.random(),
            initial_sequence: SequenceNumber::wrapping(rng.random()),
            flow_window: 8192,
            cookie: rng.random(),
            echoed_cookie: [0; 8],
        };
        let mut pkt = ControlPacket::new(ControlType::Handshake, 0, 0);
        pkt.control_info = body.to_bytes();
        pkt
    } else {
        let alg = ao.unwrap_or(DigestAlgorithm::Sha256);
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill(&mut nonce);
        let mut signature = vec![0u8; alg.output_len()];
        rng.fill(&mut signature[..]);
        let record = IdentityRecord {
            version: 1,
            principal: format!("mallory{index}"),
            issued_at_ms: now_ms,
            nonce,
            algorithm: alg,
            signature,
        };
        build_identity_packet(&record, 0)
    };
    let bytes = encode_packet(&Packet::Control(packet)).expect("forged control packet encodes");
    Datagram {
        src,
        dst: target,
        bytes: junk_trailer(bytes, ao, rng),
    }
}
