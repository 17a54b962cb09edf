use crate::seq::SequenceNumber;
use thiserror::Error;

pub const HANDSHAKE_VERSION: u32 = 1;
pub const HANDSHAKE_BODY_LEN: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandshakeKind {
    Request,
    Response,
}

/// Control information of a handshake packet (all fields big-endian):
///
/// ```text
/// version(4) | kind(4) | socket_id(4) | initial_sequence(4) | flow_window(4)
///            | cookie(8) | echoed_cookie(8)
/// ```
///
/// `socket_id`, `initial_sequence` and `cookie` describe the sender.
/// A response echoes the initiator's cookie; a request leaves it zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HandshakeBody {
    pub kind: HandshakeKind,
    pub socket_id: u32,
    pub initial_sequence: SequenceNumber,
    pub flow_window: u32,
    pub cookie: [u8; 8],
    pub echoed_cookie: [u8; 8],
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("handshake body must be {HANDSHAKE_BODY_LEN} bytes, got {0}")]
    Length(usize),
    #[error("unsupported handshake version {0}")]
    Version(u32),
    #[error("unknown handshake kind {0}")]
    Kind(u32),
    #[error("initial sequence {0:#x} exceeds 31 bits")]
    Sequence(u32),
}

impl HandshakeBody {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HANDSHAKE_BODY_LEN);
        out.extend_from_slice(&HANDSHAKE_VERSION.to_be_bytes());
        let kind: u32 = match self.kind {
            HandshakeKind::Request => 0,
            HandshakeKind::Response => 1,
        };
        out.extend_from_slice(&kind.to_be_bytes());
        out.extend_from_slice(&self.socket_id.to_be_bytes());
        out.extend_from_slice(&self.initial_sequence.value().to_be_bytes());
        out.extend_from_slice(&self.flow_window.to_be_bytes());
        out.extend_from_slice(&self.cookie);
        out.extend_from_slice(&self.echoed_cookie);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, HandshakeError> {
        if b.len() != HANDSHAKE_BODY_LEN {
            return Err(HandshakeError::Length(b.len()));
        }
        let w = |i: usize| u32::from_be_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
        if w(0) != HANDSHAKE_VERSION {
            return Err(HandshakeError::Version(w(0)));
        }
        let kind = match w(1) {
            0 => HandshakeKind::Request,
            1 => HandshakeKind::Response,
            k => return Err(HandshakeError::Kind(k)),
        };
        let isn = SequenceNumber::new(w(3)).ok_or(HandshakeError::Sequence(w(3)))?;
        Ok(HandshakeBody {
            kind,
            socket_id: w(2),
            initial_sequence: isn,
            flow_window: w(4),
            cookie: b[20..28].try_into().unwrap(),
            echoed_cookie: b[28..36].try_into().unwrap(),
        })
    }
}
