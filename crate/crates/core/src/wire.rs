//! Bit-exact codec for UDT data packets, control packets, and the AO trailer.
//!
//! Every packet starts with a 16-byte header of four big-endian 32-bit words.
//! The top bit of word 0 discriminates data (0) from control (1) packets.
//!
//! ```text
//! data:     |0|          sequence (31)            |
//!           |bb|o|      message number (29)       |
//!           |          timestamp_us (32)          |
//!           |         dest_socket_id (32)         |
//!
//! control:  |1|  ctype (15)  |  extended_type (16) |
//!           |        additional_info (32)         |
//!           |          timestamp_us (32)          |
//!           |         dest_socket_id (32)         |
//! ```
//!
//! See `WIRE-FORMAT.md` at the repository root for the per-bit tables.

use crate::auth::DigestAlgorithm;
use crate::seq::MAX_SEQ;
use thiserror::Error;

pub const HEADER_LEN: usize = 16;
pub const MAX_CONTROL_INFO: usize = 1400;
pub const MAX_MESSAGE_NUMBER: u32 = (1 << 29) - 1;
pub const MAX_CONTROL_TYPE: u16 = 0x7FFF;

/// Extended type marking an identity packet inside the user-defined control type.
pub const EXT_IDENTITY: u16 = 0x0001;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("field `{field}` value {value} exceeds its {bits}-bit width")]
    Range {
        field: &'static str,
        value: u64,
        bits: u32,
    },
    #[error("control_info of {0} bytes exceeds the {MAX_CONTROL_INFO}-byte limit")]
    ControlInfoTooLong(usize),
    #[error("packet of {0} bytes is shorter than the 16-byte header")]
    TruncatedPacket(usize),
    #[error("unknown control type {0:#06x}")]
    UnknownControlType(u16),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TrailerError {
    #[error("datagram too short to carry an authentication trailer")]
    Missing,
    #[error("unknown digest algorithm id {0}")]
    UnknownAlgorithm(u8),
    #[error("digest length {len} does not match algorithm id {algorithm_id}")]
    LengthMismatch { algorithm_id: u8, len: u8 },
}

/// Message-boundary flag carried in the top two bits of data word 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    Middle,
    First,
    Last,
    Solo,
}

impl Boundary {
    pub fn bits(self) -> u32 {
        match self {
            Boundary::Middle => 0b00,
            Boundary::First => 0b10,
            Boundary::Last => 0b01,
            Boundary::Solo => 0b11,
        }
    }

    pub fn from_bits(bits: u32) -> Self {
        match bits & 0b11 {
            0b00 => Boundary::Middle,
            0b10 => Boundary::First,
            0b01 => Boundary::Last,
            _ => Boundary::Solo,
        }
    }

    pub fn starts_message(self) -> bool {
        matches!(self, Boundary::First | Boundary::Solo)
    }

    pub fn ends_message(self) -> bool {
        matches!(self, Boundary::Last | Boundary::Solo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataPacketHeader {
    pub sequence: u32,
    pub boundary: Boundary,
    pub in_order: bool,
    pub message_number: u32,
    pub timestamp_us: u32,
    pub dest_socket_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ControlType {
    Handshake = 0x0000,
    Keepalive = 0x0001,
    Ack = 0x0002,
    Nak = 0x0003,
    Shutdown = 0x0005,
    Ack2 = 0x0006,
    UserDefined = 0x7FFF,
}

impl ControlType {
    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Result<Self, WireError> {
        Ok(match code {
            0x0000 => ControlType::Handshake,
            0x0001 => ControlType::Keepalive,
            0x0002 => ControlType::Ack,
            0x0003 => ControlType::Nak,
            0x0005 => ControlType::Shutdown,
            0x0006 => ControlType::Ack2,
            0x7FFF => ControlType::UserDefined,
            other => return Err(WireError::UnknownControlType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ControlPacket {
    pub ctype: ControlType,
    pub extended_type: u16,
    pub additional_info: u32,
    pub timestamp_us: u32,
    pub dest_socket_id: u32,
    pub control_info: Vec<u8>,
}

impl ControlPacket {
    pub fn new(ctype: ControlType, dest_socket_id: u32, timestamp_us: u32) -> Self {
        ControlPacket {
            ctype,
            extended_type: 0,
            additional_info: 0,
            timestamp_us,
            dest_socket_id,
            control_info: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ctype == ControlType::UserDefined && self.extended_type == EXT_IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Packet {
    Data {
        header: DataPacketHeader,
        payload: Vec<u8>,
    },
    Control(ControlPacket),
}

impl Packet {
    pub fn dest_socket_id(&self) -> u32 {
        match self {
            Packet::Data { header, .. } => header.dest_socket_id,
            Packet::Control(c) => c.dest_socket_id,
        }
    }
}

fn check_width(field: &'static str, value: u32, bits: u32) -> Result<(), WireError> {
    if bits < 32 && value >> bits != 0 {
        return Err(WireError::Range {
            field,
            value: value as u64,
            bits,
        });
    }
    Ok(())
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, WireError> {
    match packet {
        Packet::Data { header, payload } => {
            check_width("sequence", header.sequence, 31)?;
            check_width("message_number", header.message_number, 29)?;
            let word1 = header.boundary.bits() << 30
                | (header.in_order as u32) << 29
                | header.message_number;
            let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
            out.extend_from_slice(&header.sequence.to_be_bytes());
            out.extend_from_slice(&word1.to_be_bytes());
            out.extend_from_slice(&header.timestamp_us.to_be_bytes());
            out.extend_from_slice(&header.dest_socket_id.to_be_bytes());
            out.extend_from_slice(payload);
            Ok(out)
        }
        Packet::Control(c) => {
            if c.control_info.len() > MAX_CONTROL_INFO {
                return Err(WireError::ControlInfoTooLong(c.control_info.len()));
            }
            let word0 = 1 << 31 | (c.ctype.code() as u32) << 16 | c.extended_type as u32;
            let mut out = Vec::with_capacity(HEADER_LEN + c.control_info.len());
            out.extend_from_slice(&word0.to_be_bytes());
            out.extend_from_slice(&c.additional_info.to_be_bytes());
            out.extend_from_slice(&c.timestamp_us.to_be_bytes());
            out.extend_from_slice(&c.dest_socket_id.to_be_bytes());
            out.extend_from_slice(&c.control_info);
            Ok(out)
        }
    }
}

fn word(bytes: &[u8], index: usize) -> u32 {
    let at = index * 4;
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Reads `dest_socket_id` without decoding the rest of the packet.
pub fn peek_dest_socket_id(datagram: &[u8]) -> Option<u32> {
    (datagram.len() >= HEADER_LEN).then(|| word(datagram, 3))
}

pub fn decode_packet(datagram: &[u8]) -> Result<Packet, WireError> {
    if datagram.len() < HEADER_LEN {
        return Err(WireError::TruncatedPacket(datagram.len()));
    }
    let w0 = word(datagram, 0);
    let w1 = word(datagram, 1);
    let timestamp_us = word(datagram, 2);
    let dest_socket_id = word(datagram, 3);
    let body = &datagram[HEADER_LEN..];
    if w0 >> 31 == 0 {
        Ok(Packet::Data {
            header: DataPacketHeader {
                sequence: w0 & MAX_SEQ,
                boundary: Boundary::from_bits(w1 >> 30),
                in_order: (w1 >> 29) & 1 == 1,
                message_number: w1 & MAX_MESSAGE_NUMBER,
                timestamp_us,
                dest_socket_id,
            },
            payload: body.to_vec(),
        })
    } else {
        let ctype = ControlType::from_code(((w0 >> 16) & 0x7FFF) as u16)?;
        if body.len() > MAX_CONTROL_INFO {
            return Err(WireError::ControlInfoTooLong(body.len()));
        }
        Ok(Packet::Control(ControlPacket {
            ctype,
            extended_type: (w0 & 0xFFFF) as u16,
            additional_info: w1,
            timestamp_us,
            dest_socket_id,
            control_info: body.to_vec(),
        }))
    }
}

/// Authentication option carried after the UDT packet:
/// `[algorithm_id, digest_len] ++ digest`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AoTrailer {
    pub algorithm: DigestAlgorithm,
    pub digest: Vec<u8>,
}

impl AoTrailer {
    pub fn encoded_len(&self) -> usize {
        2 + self.digest.len()
    }
}

pub fn append_ao_trailer(mut datagram: Vec<u8>, trailer: &AoTrailer) -> Vec<u8> {
    debug_assert_eq!(trailer.digest.len(), trailer.algorithm.output_len());
    datagram.reserve(trailer.encoded_len());
    datagram.push(trailer.algorithm.id());
    datagram.push(trailer.digest.len() as u8);
    datagram.extend_from_slice(&trailer.digest);
    datagram
}

/// Splits a trailer of the expected algorithm off the end of `datagram`.
///
/// Receivers know which algorithm their site policy requires, so this is the
/// form the engine uses. A trailer of any other algorithm is malformed here.
pub fn strip_ao_trailer_as(
    datagram: &[u8],
    expected: DigestAlgorithm,
) -> Result<(&[u8], AoTrailer), TrailerError> {
    let dlen = expected.output_len();
    if datagram.len() < 2 + dlen {
        return Err(TrailerError::Missing);
    }
    let at = datagram.len() - dlen - 2;
    let (id, len) = (datagram[at], datagram[at + 1]);
    if len as usize != dlen {
        return Err(match DigestAlgorithm::from_id(id) {
            Some(_) => TrailerError::LengthMismatch {
                algorithm_id: id,
                len,
            },
            None => TrailerError::UnknownAlgorithm(id),
        });
    }
    match DigestAlgorithm::from_id(id) {
        Some(alg) if alg == expected => Ok((
            &datagram[..at],
            AoTrailer {
                algorithm: alg,
                digest: datagram[at + 2..].to_vec(),
            },
        )),
        Some(_) => Err(TrailerError::LengthMismatch {
            algorithm_id: id,
            len,
        }),
        None => Err(TrailerError::UnknownAlgorithm(id)),
    }
}

/// Splits a trailer of any registered algorithm off the end of `datagram`.
///
/// The trailer is located by its length byte, trying the longest digest
/// first. Payload bytes can mimic a shorter candidate, so callers that know
/// the algorithm should prefer [`strip_ao_trailer_as`].
pub fn strip_ao_trailer(datagram: &[u8]) -> Result<(&[u8], AoTrailer), TrailerError> {
    let mut first_err = None;
    for alg in DigestAlgorithm::ALL.iter().rev() {
        match strip_ao_trailer_as(datagram, *alg) {
            Ok(found) => return Ok(found),
            Err(TrailerError::Missing) => {}
            Err(e) => {
                let dlen = alg.output_len();
                let len_byte = datagram[datagram.len() - dlen - 1] as usize;
                // Only a matching length byte makes this a real candidate.
                if len_byte == dlen && first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    Err(first_err.unwrap_or(TrailerError::Missing))
}
