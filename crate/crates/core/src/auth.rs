//! Per-segment Authentication Option (AO).
//!
//! The digest covers, in order:
//!
//! 1. the 12-byte UDP pseudo-header, whose length covers the UDP header, the
//!    UDT packet, and the AO trailer;
//! 2. an 8-byte UDP header image with a zero checksum, followed by the full
//!    UDT packet (header and payload or control information);
//! 3. the shared password;
//! 4. the 16-byte connection key (initiator cookie, then responder cookie).
//!
//! This is a plain keyed-suffix hash, not HMAC. A failed verification is
//! reported as [`VerifyOutcome`] so the caller can drop without replying.

use crate::checksum::{build_pseudo_header, ChecksumError, PseudoHeader, UdpHeader, UDP_HEADER_LEN};
use crate::wire::{append_ao_trailer, strip_ao_trailer_as, AoTrailer, TrailerError};
use md5::Md5;
use serde::{Deserialize, Serialize};
use sha1::Sha1;
use sha2::{Digest, Sha256};
use std::fmt;
use std::net::SocketAddrV4;
use std::path::Path;
use std::str::FromStr;
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const MAX_PASSWORD_LEN: usize = 128;
pub const CONNECTION_KEY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestAlgorithm {
    Md5,
    Sha1,
    Sha256,
}

impl DigestAlgorithm {
    pub const ALL: [DigestAlgorithm; 3] = [DigestAlgorithm::Md5, DigestAlgorithm::Sha1, DigestAlgorithm::Sha256];

    pub fn id(self) -> u8 {
        match self {
            DigestAlgorithm::Md5 => 1,
            DigestAlgorithm::Sha1 => 2,
            DigestAlgorithm::Sha256 => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(DigestAlgorithm::Md5),
            2 => Some(DigestAlgorithm::Sha1),
            3 => Some(DigestAlgorithm::Sha256),
            _ => None,
        }
    }

    pub fn output_len(self) -> usize {
        match self {
            DigestAlgorithm::Md5 => 16,
            DigestAlgorithm::Sha1 => 20,
            DigestAlgorithm::Sha256 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DigestAlgorithm::Md5 => "md5",
            DigestAlgorithm::Sha1 => "sha1",
            DigestAlgorithm::Sha256 => "sha256",
        }
    }
}

impl fmt::Display for DigestAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown digest algorithm `{0}` (expected one of: md5, sha1, sha256)")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for DigestAlgorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md5" => Ok(DigestAlgorithm::Md5),
            "sha1" | "sha-1" => Ok(DigestAlgorithm::Sha1),
            "sha256" | "sha-256" => Ok(DigestAlgorithm::Sha256),
            _ => Err(UnknownAlgorithm(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("key is empty")]
    Empty,
    #[error("key is {0} bytes; at most {MAX_PASSWORD_LEN} are allowed")]
    TooLong(usize),
    #[error("key byte {value:#04x} at offset {offset} is not printable ASCII")]
    NonPrintable { offset: usize, value: u8 },
}

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error("cannot read key file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid key in {path}: {source}")]
    Invalid {
        path: String,
        #[source]
        source: KeyError,
    },
}

/// Shared secret: printable ASCII (0x20..=0x7E), 1 to 128 bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct Password(Vec<u8>);

impl Password {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, KeyError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(KeyError::Empty);
        }
        if bytes.len() > MAX_PASSWORD_LEN {
            return Err(KeyError::TooLong(bytes.len()));
        }
        if let Some((offset, &value)) = bytes.iter().enumerate().find(|(_, b)| !(0x20..=0x7E).contains(*b)) {
            return Err(KeyError::NonPrintable { offset, value });
        }
        Ok(Password(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Password {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Password(<{} bytes redacted>)", self.0.len())
    }
}

/// Reads the first line of a key file, dropping one trailing newline.
pub fn load_key(path: impl AsRef<Path>) -> Result<Password, KeyFileError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let raw = std::fs::read(path).map_err(|source| KeyFileError::Io {
        path: display.clone(),
        source,
    })?;
    let line_end = raw.iter().position(|&b| b == b'\n').unwrap_or(raw.len());
    let mut line = &raw[..line_end];
    if let [rest @ .., b'\r'] = line {
        line = rest;
    }
    Password::new(line).map_err(|source| KeyFileError::Invalid { path: display, source })
}

/// Per-connection key: the initiator's 8-byte cookie followed by the responder's.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ConnectionKey(pub [u8; CONNECTION_KEY_LEN]);

impl ConnectionKey {
    pub fn from_cookies(initiator: [u8; 8], responder: [u8; 8]) -> Self {
        let mut k = [0u8; CONNECTION_KEY_LEN];
        k[..8].copy_from_slice(&initiator);
        k[8..].copy_from_slice(&responder);
        ConnectionKey(k)
    }

    /// Key used before the responder's cookie is known.
    pub fn partial(initiator: [u8; 8]) -> Self {
        Self::from_cookies(initiator, [0u8; 8])
    }
}

impl fmt::Debug for ConnectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConnectionKey(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub password: Password,
    pub connection_key: ConnectionKey,
}

/// Addressing bound into a segment's digest: pseudo-header plus UDP ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentAddressing {
    pub pseudo: PseudoHeader,
    pub src_port: u16,
    pub dst_port: u16,
}

impl SegmentAddressing {
    /// Addressing for a UDT packet of `packet_len` bytes that will carry an
    /// `alg` trailer, sent from `src` to `dst`.
    pub fn for_segment(
        src: SocketAddrV4,
        dst: SocketAddrV4,
        packet_len: usize,
        alg: DigestAlgorithm,
    ) -> Result<Self, ChecksumError> {
        let udp_len = UDP_HEADER_LEN + packet_len + 2 + alg.output_len();
        Ok(SegmentAddressing {
            pseudo: build_pseudo_header(*src.ip(), *dst.ip(), udp_len)?,
            src_port: src.port(),
            dst_port: dst.port(),
        })
    }

    fn udp_header(&self) -> UdpHeader {
        UdpHeader {
            src_port: self.src_port,
            dst_port: self.dst_port,
            length: self.pseudo.udp_length,
            checksum: 0,
        }
    }
}

pub fn digest_input_bytes(addr: &SegmentAddressing, udt_packet: &[u8], key: &KeyMaterial) -> Vec<u8> {
    let password = key.password.as_bytes();
    let mut input = Vec::with_capacity(12 + UDP_HEADER_LEN + udt_packet.len() + password.len() + CONNECTION_KEY_LEN);
    input.extend_from_slice(&addr.pseudo.to_bytes());
    input.extend_from_slice(&addr.udp_header().to_bytes());
    input.extend_from_slice(udt_packet);
    input.extend_from_slice(password);
    input.extend_from_slice(&key.connection_key.0);
    input
}

pub fn compute_ao_digest(alg: DigestAlgorithm, input: &[u8]) -> Vec<u8> {
    match alg {
        DigestAlgorithm::Md5 => Md5::digest(input).to_vec(),
        DigestAlgorithm::Sha1 => Sha1::digest(input).to_vec(),
        DigestAlgorithm::Sha256 => Sha256::digest(input).to_vec(),
    }
}

pub fn sign_segment(alg: DigestAlgorithm, addr: &SegmentAddressing, udt_packet: &[u8], key: &KeyMaterial) -> AoTrailer {
    AoTrailer {
        algorithm: alg,
        digest: compute_ao_digest(alg, &digest_input_bytes(addr, udt_packet, key)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Verdict {
    Accept,
    DropSilently,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum VerifyReason {
    Ok,
    DigestMismatch,
    MalformedTrailer,
    MissingTrailer,
}

/// Result of checking a segment's trailer. `verdict` is `Accept` iff
/// `reason` is `Ok`; construct through the associated functions to keep
/// that pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerifyOutcome {
    verdict: Verdict,
    reason: VerifyReason,
}

impl VerifyOutcome {
    pub const ACCEPT: VerifyOutcome = VerifyOutcome {
        verdict: Verdict::Accept,
        reason: VerifyReason::Ok,
    };

    pub fn drop(reason: VerifyReason) -> Self {
        debug_assert_ne!(reason, VerifyReason::Ok);
        VerifyOutcome {
            verdict: Verdict::DropSilently,
            reason,
        }
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn reason(&self) -> VerifyReason {
        self.reason
    }

    pub fn is_accept(&self) -> bool {
        self.verdict == Verdict::Accept
    }
}

pub fn verify_segment(
    alg: DigestAlgorithm,
    addr: &SegmentAddressing,
    udt_packet: &[u8],
    trailer: &AoTrailer,
    key: &KeyMaterial,
) -> VerifyOutcome {
    if trailer.algorithm != alg || trailer.digest.len() != alg.output_len() {
        return VerifyOutcome::drop(VerifyReason::DigestMismatch);
    }
    let expected = compute_ao_digest(alg, &digest_input_bytes(addr, udt_packet, key));
    if bool::from(expected.ct_eq(&trailer.digest)) {
        VerifyOutcome::ACCEPT
    } else {
        VerifyOutcome::drop(VerifyReason::DigestMismatch)
    }
}

/// Signs `udt_packet` for the `src -> dst` flow and appends the trailer.
pub fn seal(
    alg: DigestAlgorithm,
    src: SocketAddrV4,
    dst: SocketAddrV4,
    udt_packet: Vec<u8>,
    key: &KeyMaterial,
) -> Result<Vec<u8>, ChecksumError> {
    let addr = SegmentAddressing::for_segment(src, dst, udt_packet.len(), alg)?;
    let trailer = sign_segment(alg, &addr, &udt_packet, key);
    Ok(append_ao_trailer(udt_packet, &trailer))
}

/// Strips and verifies the trailer of a datagram received on the
/// `src -> dst` flow. Returns the bare UDT packet on success.
pub fn open<'a>(
    alg: DigestAlgorithm,
    src: SocketAddrV4,
    dst: SocketAddrV4,
    datagram: &'a [u8],
    key: &KeyMaterial,
) -> Result<&'a [u8], VerifyOutcome> {
    let (packet, trailer) = strip_ao_trailer_as(datagram, alg).map_err(|e| {
        VerifyOutcome::drop(match e {
            TrailerError::Missing => VerifyReason::MissingTrailer,
            _ => VerifyReason::MalformedTrailer,
        })
    })?;
    let addr = SegmentAddressing::for_segment(src, dst, packet.len(), alg)
        .map_err(|_| VerifyOutcome::drop(VerifyReason::MalformedTrailer))?;
    let outcome = verify_segment(alg, &addr, packet, &trailer, key);
    if outcome.is_accept() {
        Ok(packet)
    } else {
        Err(outcome)
    }
}
