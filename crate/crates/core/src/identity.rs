//! First-packet identity and the pre-state admission guard.
//!
//! The identity record rides in a user-defined control packet
//! (`ctype = 0x7FFF`, `extended_type = 0x0001`) and is laid out as:
//!
//! ```text
//! version(1) | principal_len(1) | principal | issued_at_ms(8, BE)
//!            | nonce(16) | algorithm_id(1) | signature(digest_len)
//! ```
//!
//! `signature = H(all preceding fields ++ password)`. The guard evaluates a
//! record with a handful of hash-set lookups and allocates nothing for a
//! rejected sender; only accepted nonces are remembered.

use crate::auth::{compute_ao_digest, DigestAlgorithm, Password};
use crate::wire::{ControlPacket, ControlType, EXT_IDENTITY};
use serde::Serialize;
use std::collections::{HashSet, VecDeque};
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const IDENTITY_VERSION: u8 = 1;
pub const NONCE_LEN: usize = 16;
pub const MAX_PRINCIPAL_LEN: usize = 255;
pub const DEFAULT_MAX_CLOCK_SKEW_MS: u64 = 30_000;
pub const DEFAULT_NONCE_CAPACITY: usize = 65_536;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("principal must be 1..=255 bytes, got {0}")]
    Range(usize),
    #[error("malformed identity packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdentityRecord {
    pub version: u8,
    pub principal: String,
    pub issued_at_ms: u64,
    pub nonce: [u8; NONCE_LEN],
    pub algorithm: DigestAlgorithm,
    pub signature: Vec<u8>,
}

impl IdentityRecord {
    /// Builds and signs a record.
    pub fn signed(
        principal: &str,
        issued_at_ms: u64,
        nonce: [u8; NONCE_LEN],
        algorithm: DigestAlgorithm,
        password: &Password,
    ) -> Result<Self, IdentityError> {
        if principal.is_empty() || principal.len() > MAX_PRINCIPAL_LEN {
            return Err(IdentityError::Range(principal.len()));
        }
        let mut record = IdentityRecord {
            version: IDENTITY_VERSION,
            principal: principal.to_string(),
            issued_at_ms,
            nonce,
            algorithm,
            signature: Vec::new(),
        };
        record.signature = record.expected_signature(password);
        Ok(record)
    }

    fn signed_fields(&self) -> Vec<u8> {
        let p = self.principal.as_bytes();
        let mut out = Vec::with_capacity(2 + p.len() + 8 + NONCE_LEN + 1);
        out.push(self.version);
        out.push(p.len() as u8);
        out.extend_from_slice(p);
        out.extend_from_slice(&self.issued_at_ms.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.push(self.algorithm.id());
        out
    }

    fn expected_signature(&self, password: &Password) -> Vec<u8> {
        let mut input = self.signed_fields();
        input.extend_from_slice(password.as_bytes());
        compute_ao_digest(self.algorithm, &input)
    }

    pub fn signature_valid(&self, password: &Password) -> bool {
        self.signature.len() == self.algorithm.output_len()
            && bool::from(self.expected_signature(password).ct_eq(&self.signature))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_fields();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        use IdentityError::Malformed;
        let (&version, rest) = bytes.split_first().ok_or(Malformed("empty"))?;
        if version != IDENTITY_VERSION {
            return Err(Malformed("unsupported version"));
        }
        let (&plen, rest) = rest.split_first().ok_or(Malformed("missing principal length"))?;
        let plen = plen as usize;
        if plen == 0 {
            return Err(Malformed("empty principal"));
        }
        if rest.len() < plen + 8 + NONCE_LEN + 1 {
            return Err(Malformed("truncated fields"));
        }
        let (principal, rest) = rest.split_at(plen);
        let principal = std::str::from_utf8(principal).map_err(|_| Malformed("principal is not UTF-8"))?;
        let (issued, rest) = rest.split_at(8);
        let (nonce, rest) = rest.split_at(NONCE_LEN);
        let (&alg_id, signature) = rest.split_first().ok_or(Malformed("missing algorithm"))?;
        let algorithm = DigestAlgorithm::from_id(alg_id).ok_or(Malformed("unknown algorithm"))?;
        if signature.len() != algorithm.output_len() {
            return Err(Malformed("signature length mismatch"));
        }
        Ok(IdentityRecord {
            version,
            principal: principal.to_string(),
            issued_at_ms: u64::from_be_bytes(issued.try_into().unwrap()),
            nonce: nonce.try_into().unwrap(),
            algorithm,
            signature: signature.to_vec(),
        })
    }

    /// The first half of the nonce doubles as the initiator's connection cookie.
    pub fn cookie(&self) -> [u8; 8] {
        self.nonce[..8].try_into().unwrap()
    }
}

/// Wraps a signed record in an identity control packet addressed to socket 0.
pub fn build_identity_packet(record: &IdentityRecord, timestamp_us: u32) -> ControlPacket {
    let mut pkt = ControlPacket::new(ControlType::UserDefined, 0, timestamp_us);
    pkt.extended_type = EXT_IDENTITY;
    pkt.control_info = record.to_bytes();
    pkt
}

pub fn parse_identity_packet(pkt: &ControlPacket) -> Result<IdentityRecord, IdentityError> {
    if !pkt.is_identity() {
        return Err(IdentityError::Malformed("not an identity packet"));
    }
    IdentityRecord::from_bytes(&pkt.control_info)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum GuardReason {
    Ok,
    BadSignature,
    UnknownPrincipal,
    StaleTimestamp,
    ReplayedNonce,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum GuardVerdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GuardDecision {
    pub reason: GuardReason,
}

impl GuardDecision {
    pub fn verdict(&self) -> GuardVerdict {
        if self.reason == GuardReason::Ok {
            GuardVerdict::Accept
        } else {
            GuardVerdict::Reject
        }
    }

    pub fn is_accept(&self) -> bool {
        self.reason == GuardReason::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardMode {
    AllowAll,
    Allowlist(HashSet<String>),
}

/// Parses an allowlist file: one principal per line, `#` starts a comment.
pub fn parse_allowlist(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bounded FIFO set of recently accepted nonces.
#[derive(Debug, Clone)]
pub struct NonceCache {
    capacity: usize,
    order: VecDeque<[u8; NONCE_LEN]>,
    members: HashSet<[u8; NONCE_LEN]>,
}

impl NonceCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        NonceCache {
            capacity,
            order: VecDeque::new(),
            members: HashSet::new(),
        }
    }

    pub fn contains(&self, nonce: &[u8; NONCE_LEN]) -> bool {
        self.members.contains(nonce)
    }

    pub fn insert(&mut self, nonce: [u8; NONCE_LEN]) {
        if !self.members.insert(nonce) {
            return;
        }
        self.order.push_back(nonce);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.members.remove(&old);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone)]
pub struct GuardPolicy {
    pub mode: GuardMode,
    pub max_clock_skew_ms: u64,
    pub seen_nonces: NonceCache,
}

impl GuardPolicy {
    pub fn new(mode: GuardMode) -> Self {
        GuardPolicy {
            mode,
            max_clock_skew_ms: DEFAULT_MAX_CLOCK_SKEW_MS,
            seen_nonces: NonceCache::new(DEFAULT_NONCE_CAPACITY),
        }
    }

    pub fn allow_all() -> Self {
        Self::new(GuardMode::AllowAll)
    }

    pub fn allowlist<I, S>(principals: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(GuardMode::Allowlist(principals.into_iter().map(Into::into).collect()))
    }
}

/// Checks signature, then clock skew, then nonce freshness (recording the
/// nonce), then the principal. The first failing check decides.
///
/// Signature comes first so an unauthenticated sender learns nothing about
/// the allowlist.
pub fn guard_decide(record: &IdentityRecord, policy: &mut GuardPolicy, password: &Password, now_ms: u64) -> GuardDecision {
    let reason = if record.version != IDENTITY_VERSION {
        GuardReason::Malformed
    } else if !record.signature_valid(password) {
        GuardReason::BadSignature
    } else if record.issued_at_ms.abs_diff(now_ms) > policy.max_clock_skew_ms {
        GuardReason::StaleTimestamp
    } else if policy.seen_nonces.contains(&record.nonce) {
        GuardReason::ReplayedNonce
    } else {
        policy.seen_nonces.insert(record.nonce);
        match &policy.mode {
            GuardMode::AllowAll => GuardReason::Ok,
            GuardMode::Allowlist(set) if set.contains(&record.principal) => GuardReason::Ok,
            GuardMode::Allowlist(_) => GuardReason::UnknownPrincipal,
        }
    };
    GuardDecision { reason }
}
