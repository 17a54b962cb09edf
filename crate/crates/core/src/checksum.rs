//! UDP pseudo-header and one's-complement checksum.
//!
//! The pseudo-header here is 12 bytes: source address (4), destination
//! address (4), protocol (2), UDP length (2). The protocol field is a full
//! big-endian 16-bit value rather than a zero byte followed by the protocol
//! byte; both encode 17 identically on the wire image, but the field is
//! typed as `u16` to keep the layout explicit.

use std::net::{Ipv4Addr, SocketAddrV4};
use thiserror::Error;

pub const PSEUDO_HEADER_LEN: usize = 12;
pub const UDP_HEADER_LEN: usize = 8;
pub const IPPROTO_UDP: u16 = 17;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ChecksumError {
    #[error("UDP length {0} exceeds 65535")]
    Range(usize),
    #[error("UDP datagram of {0} bytes is shorter than its 8-byte header")]
    TruncatedDatagram(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PseudoHeader {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub protocol: u16,
    pub udp_length: u16,
}

impl PseudoHeader {
    pub fn to_bytes(&self) -> [u8; PSEUDO_HEADER_LEN] {
        let mut out = [0u8; PSEUDO_HEADER_LEN];
        out[0..4].copy_from_slice(&self.src_addr.octets());
        out[4..8].copy_from_slice(&self.dst_addr.octets());
        out[8..10].copy_from_slice(&self.protocol.to_be_bytes());
        out[10..12].copy_from_slice(&self.udp_length.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: [u8; PSEUDO_HEADER_LEN]) -> Self {
        PseudoHeader {
            src_addr: Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]),
            dst_addr: Ipv4Addr::new(bytes[4], bytes[5], bytes[6], bytes[7]),
            protocol: u16::from_be_bytes([bytes[8], bytes[9]]),
            udp_length: u16::from_be_bytes([bytes[10], bytes[11]]),
        }
    }
}

pub fn build_pseudo_header(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    udp_length: usize,
) -> Result<PseudoHeader, ChecksumError> {
    let udp_length = u16::try_from(udp_length).map_err(|_| ChecksumError::Range(udp_length))?;
    Ok(PseudoHeader {
        src_addr: src,
        dst_addr: dst,
        protocol: IPPROTO_UDP,
        udp_length,
    })
}

/// Image of the 8-byte UDP header: ports, length, checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

impl UdpHeader {
    pub fn to_bytes(&self) -> [u8; UDP_HEADER_LEN] {
        let mut out = [0u8; UDP_HEADER_LEN];
        out[0..2].copy_from_slice(&self.src_port.to_be_bytes());
        out[2..4].copy_from_slice(&self.dst_port.to_be_bytes());
        out[4..6].copy_from_slice(&self.length.to_be_bytes());
        out[6..8].copy_from_slice(&self.checksum.to_be_bytes());
        out
    }
}

/// Accumulates 16-bit big-endian words into a wide sum, padding a trailing
/// odd byte with a zero octet.
pub fn ones_complement_sum(bytes: &[u8], initial: u64) -> u64 {
    let mut acc = initial;
    let mut chunks = bytes.chunks_exact(2);
    for pair in &mut chunks {
        acc += u16::from_be_bytes([pair[0], pair[1]]) as u64;
    }
    if let [last] = chunks.remainder() {
        acc += (*last as u64) << 8;
    }
    acc
}

/// Folds carries back into the low 16 bits.
pub fn fold(mut acc: u64) -> u16 {
    while acc >> 16 != 0 {
        acc = (acc & 0xFFFF) + (acc >> 16);
    }
    acc as u16
}

/// One's complement of the one's-complement sum over
/// `pseudo ++ udp_header ++ data`. The caller zeroes the header's checksum field.
pub fn ones_complement_checksum(pseudo: &PseudoHeader, udp_header: &[u8], data: &[u8]) -> u16 {
    let mut acc = ones_complement_sum(&pseudo.to_bytes(), 0);
    acc = ones_complement_sum(udp_header, acc);
    acc = ones_complement_sum(data, acc);
    !fold(acc)
}

/// Recomputes the checksum of a full UDP datagram and compares it with the
/// stored field at bytes 6..8.
pub fn verify_udp_checksum(pseudo: &PseudoHeader, udp_datagram: &[u8]) -> Result<bool, ChecksumError> {
    if udp_datagram.len() < UDP_HEADER_LEN {
        return Err(ChecksumError::TruncatedDatagram(udp_datagram.len()));
    }
    let stored = u16::from_be_bytes([udp_datagram[6], udp_datagram[7]]);
    let mut header = [0u8; UDP_HEADER_LEN];
    header.copy_from_slice(&udp_datagram[..UDP_HEADER_LEN]);
    header[6] = 0;
    header[7] = 0;
    let computed = ones_complement_checksum(pseudo, &header, &udp_datagram[UDP_HEADER_LEN..]);
    Ok(computed == stored)
}

/// Builds a complete UDP datagram image (header with valid checksum ++ payload)
/// for a flow between two IPv4 socket addresses.
pub fn frame_udp(src: SocketAddrV4, dst: SocketAddrV4, payload: &[u8]) -> Result<Vec<u8>, ChecksumError> {
    let total = UDP_HEADER_LEN + payload.len();
    let pseudo = build_pseudo_header(*src.ip(), *dst.ip(), total)?;
    let mut header = UdpHeader {
        src_port: src.port(),
        dst_port: dst.port(),
        length: total as u16,
        checksum: 0,
    };
    header.checksum = ones_complement_checksum(&pseudo, &header.to_bytes(), payload);
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}
