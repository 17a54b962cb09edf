//! Deterministic in-process network for exercising two engines under loss,
//! duplication, reordering, tampering and injection.
//!
//! Everything runs on a virtual microsecond clock on one thread. For a fixed
//! scenario (including its seed) a trial produces the same report every time.

mod attack;
mod channel;
mod scenario;

pub use attack::{forge_connection_attempt, inject_spoof, ObservedFlow, SpoofProfile};
pub use channel::{channel_step, Channel, ChannelPolicy, ChannelStats};
pub use scenario::{Expectations, FloodAttack, Scenario, ScenarioError, SpoofAttack};

use crate::auth::{DigestAlgorithm, Password};
use crate::engine::{
    Connection, ConnectionConfig, ConnectionStats, Disposition, EngineError, Listener, ListenerConfig,
    RejectionBreakdown,
};
use crate::identity::{GuardMode, GuardPolicy};
use crate::seq::SequenceNumber;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::{Duration, Instant};
use thiserror::Error;

pub const REPORT_SCHEMA: u32 = 1;
pub const SENDER_ADDR: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 1, 0, 1), 40_000);
pub const RECEIVER_ADDR: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 1, 0, 2), 9_000);
/// Wall-clock milliseconds that virtual time zero maps to.
pub const VIRTUAL_EPOCH_MS: u64 = 1_700_000_000_000;
/// How long a closing trial waits for the shutdown to land.
const CLOSE_GRACE_US: u64 = 200_000;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Receiver-side counters that do not depend on timer granularity, plus a
/// hash of the delivered bytes. Two runs of the same transfer over perfect
/// paths must produce equal digests regardless of the transport underneath.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReceiverDigest {
    pub data_accepted: u64,
    pub duplicates: u64,
    pub delivered_messages: u64,
    pub delivered_bytes: u64,
    pub dropped_auth: u64,
    pub dropped_malformed: u64,
    pub reassembly_errors: u64,
    pub sha256: String,
}

impl ReceiverDigest {
    pub fn capture(stats: &ConnectionStats, received: &[u8]) -> Self {
        ReceiverDigest {
            data_accepted: stats.data_accepted,
            duplicates: stats.duplicates,
            delivered_messages: stats.delivered_messages,
            delivered_bytes: stats.delivered_bytes,
            dropped_auth: stats.dropped_auth,
            dropped_malformed: stats.dropped_malformed,
            reassembly_errors: stats.reassembly_errors,
            sha256: sha256_hex(received),
        }
    }
}

/// Where each injected datagram ended up. The fields sum to `injected`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InjectionBreakdown {
    pub accepted: u64,
    pub duplicate: u64,
    pub dropped_auth: u64,
    pub malformed: u64,
    pub ignored: u64,
    pub rejected: u64,
    pub unroutable: u64,
    pub closed: u64,
}

impl InjectionBreakdown {
    fn record(&mut self, d: Disposition) {
        match d {
            Disposition::Accepted => self.accepted += 1,
            Disposition::Duplicate => self.duplicate += 1,
            Disposition::DroppedAuth(_) => self.dropped_auth += 1,
            Disposition::Malformed => self.malformed += 1,
            Disposition::Ignored => self.ignored += 1,
            Disposition::Rejected(_) => self.rejected += 1,
            Disposition::Unroutable => self.unroutable += 1,
            Disposition::Closed => self.closed += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.accepted
            + self.duplicate
            + self.dropped_auth
            + self.malformed
            + self.ignored
            + self.rejected
            + self.unroutable
            + self.closed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub algorithm: Option<DigestAlgorithm>,
    /// Spoofed segments plus flood attempts.
    pub injected: u64,
    pub spoofed: u64,
    pub flood_attempts: u64,
    pub accepted_by_receiver: u64,
    pub injected_breakdown: InjectionBreakdown,
    /// AO failures at either endpoint, including pre-state refusals.
    pub auth_drops: u64,
    pub responses_observed_by_attacker: u64,
    pub transfer_ok: bool,
    pub elapsed_us: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub sender_sha256: String,
    pub receiver_sha256: String,
    pub connections_allocated: u64,
    pub guard_rejections: u64,
    pub guard_rejection_reasons: RejectionBreakdown,
    pub nonce_cache_len: usize,
    pub nonce_cache_capacity: usize,
    pub receiver: Option<ReceiverDigest>,
    pub sender_stats: ConnectionStats,
    pub receiver_stats: Option<ConnectionStats>,
    pub forward_channel: ChannelStats,
    pub reverse_channel: ChannelStats,
}

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("trial exceeded its wall-clock budget of {0} ms")]
    Timeout(u64),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
}

/// The bytes a scenario transfers: its payload file, or seeded random bytes.
pub fn scenario_payload(s: &Scenario) -> Result<Vec<u8>, ScenarioError> {
    if let Some(path) = &s.payload_file {
        return std::fs::read(path).map_err(|source| ScenarioError::Io {
            path: path.clone(),
            source,
        });
    }
    let mut payload = vec![0u8; s.payload_bytes];
    ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_da7a).fill_bytes(&mut payload);
    Ok(payload)
}

fn password(text: &str) -> Result<Password, ScenarioError> {
    Password::new(text.as_bytes()).map_err(|e| ScenarioError::Invalid(format!("key: {e}")))
}

/// Engine configurations for the two ends of a scenario.
pub fn endpoint_configs(s: &Scenario) -> Result<(ConnectionConfig, ListenerConfig), ScenarioError> {
    let sender = ConnectionConfig {
        password: Some(password(&s.key)?),
        ao: s.ao,
        identity: s.identity.clone(),
        identity_algorithm: s.ao.unwrap_or(DigestAlgorithm::Sha256),
        initial_sequence: s.initial_sequence.map(SequenceNumber::wrapping),
        epoch_ms: VIRTUAL_EPOCH_MS,
        ..ConnectionConfig::default()
    };
    let receiver = ConnectionConfig {
        password: Some(password(s.receiver_key.as_deref().unwrap_or(&s.key))?),
        ao: s.ao,
        epoch_ms: VIRTUAL_EPOCH_MS,
        ..ConnectionConfig::default()
    };
    let guard = match &s.allowlist {
        Some(list) => GuardPolicy::new(GuardMode::Allowlist(list.iter().cloned().collect())),
        None => GuardPolicy::allow_all(),
    };
    Ok((
        sender,
        ListenerConfig {
            connection: receiver,
            require_identity: s.require_identity,
            guard,
            ..ListenerConfig::default()
        },
    ))
}

struct Injector {
    total: u64,
    done: u64,
    interval_us: u64,
    next_us: Option<u64>,
}

impl Injector {
    fn new(total: u64, rate_per_sec: u64) -> Self {
        Injector {
            total,
            done: 0,
            interval_us: (1_000_000 / rate_per_sec.max(1)).max(1),
            next_us: None,
        }
    }

    fn finished(&self) -> bool {
        self.done >= self.total
    }

    fn due(&self, now: u64) -> bool {
        !self.finished() && self.next_us.is_some_and(|t| t <= now)
    }

    fn advance(&mut self) {
        self.done += 1;
        self.next_us = self.next_us.map(|t| t + self.interval_us);
    }

    fn wakeup(&self) -> Option<u64> {
        if self.finished() {
            None
        } else {
            self.next_us
        }
    }
}

/// Runs one scenario to completion, time limit or wall budget.
pub fn run_trial(s: &Scenario) -> Result<TrialReport, TrialError> {
    s.validate()?;
    let wall_start = Instant::now();
    let budget = Duration::from_millis(s.wall_budget_ms);
    let payload = scenario_payload(s)?;
    let (sender_cfg, listener_cfg) = endpoint_configs(s)?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut attacker_rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(2));
    let mut forward = Channel::new(s.channel.clone());
    let mut reverse = Channel::new(ChannelPolicy {
        seed: s.channel.seed.wrapping_add(3),
        ..s.channel.clone()
    });
    let mut listener = Listener::new(listener_cfg, s.seed.wrapping_add(1))?;

    let mut now: u64 = 0;
    let (mut sender, first) = Connection::open(sender_cfg, SENDER_ADDR, RECEIVER_ADDR, now, &mut rng)?;
    for d in first {
        forward.send(now, d);
    }
    for chunk in payload.chunks(s.message_size) {
        for d in sender.send_message(chunk, true)? {
            forward.send(now, d);
        }
    }

    let mut spoof = s.spoof.as_ref().map(|a| Injector::new(a.count, a.profile.rate_per_sec));
    let mut flood = s.flood.as_ref().map(|f| {
        let mut inj = Injector::new(f.attempts, f.rate_per_sec);
        inj.next_us = Some(0);
        inj
    });
    let mut breakdown = InjectionBreakdown::default();
    let mut responses = 0u64;
    let mut receiver_id: Option<u32> = None;
    let mut received = Vec::new();
    let mut ever_established = false;
    let mut closing_since: Option<u64> = None;
    let mut iterations = 0u64;

    loop {
        iterations += 1;
        if iterations.is_multiple_of(1024) && wall_start.elapsed() > budget {
            return Err(TrialError::Timeout(s.wall_budget_ms));
        }

        for d in forward.deliver_due(now) {
            for o in listener.handle_datagram(now, &d).out {
                reverse.send(now, o);
            }
        }
        for d in reverse.deliver_due(now) {
            for o in sender.handle_datagram(now, &d).out {
                forward.send(now, o);
            }
        }
        if receiver_id.is_none() {
            receiver_id = listener.accept();
        }
        ever_established |= sender.phase() == crate::engine::Phase::Established;

        if let (Some(inj), Some(attack), Some(id)) = (spoof.as_mut(), s.spoof.as_ref(), receiver_id) {
            if inj.next_us.is_none() {
                inj.next_us = Some(now);
            }
            while inj.due(now) {
                let expected = listener.connection(id).map_or(SequenceNumber::ZERO, |c| c.rcv_expected());
                let flow = ObservedFlow {
                    sender: SENDER_ADDR,
                    receiver: RECEIVER_ADDR,
                    receiver_socket_id: id,
                    expected_sequence: expected,
                };
                let d = inject_spoof(&attack.profile, &flow, s.ao, now, &mut attacker_rng);
                let h = listener.handle_datagram(now, &d);
                breakdown.record(h.disposition);
                responses += h.out.len() as u64;
                for o in h.out {
                    reverse.send(now, o);
                }
                inj.advance();
            }
        }
        if let Some(inj) = flood.as_mut() {
            while inj.due(now) {
                let now_ms = VIRTUAL_EPOCH_MS + now / 1000;
                let d = forge_connection_attempt(inj.done, RECEIVER_ADDR, s.ao, now_ms, &mut attacker_rng);
                let h = listener.handle_datagram(now, &d);
                breakdown.record(h.disposition);
                responses += h.out.len() as u64;
                inj.advance();
            }
        }

        for d in sender.tick(now) {
            forward.send(now, d);
        }
        for d in listener.tick(now) {
            reverse.send(now, d);
        }
        if let Some(conn) = receiver_id.and_then(|id| listener.connection_mut(id)) {
            while let Some(m) = conn.recv_message() {
                received.extend_from_slice(&m);
            }
        }

        let attacks_done = spoof.as_ref().is_none_or(|i| i.finished() || receiver_id.is_none())
            && flood.as_ref().is_none_or(Injector::finished);
        let transfer_done = ever_established && sender.all_acknowledged();
        match closing_since {
            None if transfer_done && attacks_done && spoof.as_ref().is_none_or(Injector::finished) => {
                for d in sender.close() {
                    forward.send(now, d);
                }
                closing_since = Some(now);
            }
            Some(t) => {
                let receiver_closed = receiver_id
                    .and_then(|id| listener.connection(id))
                    .is_none_or(|c| c.phase() == crate::engine::Phase::Closed);
                if receiver_closed || now >= t + CLOSE_GRACE_US {
                    break;
                }
            }
            None => {}
        }
        if sender.phase() == crate::engine::Phase::Closed && closing_since.is_none() && attacks_done {
            break;
        }
        if now >= s.time_limit_us {
            break;
        }

        let mut next = sender.next_wakeup().min(listener.next_wakeup()).min(s.time_limit_us);
        for t in [
            forward.next_due(),
            reverse.next_due(),
            spoof.as_ref().and_then(Injector::wakeup),
            flood.as_ref().and_then(Injector::wakeup),
            closing_since.map(|t| t + CLOSE_GRACE_US),
        ]
        .into_iter()
        .flatten()
        {
            next = next.min(t);
        }
        now = next.max(now + 1);
    }

    let receiver = receiver_id.and_then(|id| listener.connection(id));
    let lstats = listener.stats();
    let sender_stats = sender.stats().clone();
    let receiver_stats = receiver.map(|c| c.stats().clone());
    let auth_drops = sender_stats.dropped_auth
        + receiver_stats.as_ref().map_or(0, |r| r.dropped_auth)
        + lstats.rejections.auth_failed;
    let spoofed = spoof.as_ref().map_or(0, |i| i.done);
    let flood_attempts = flood.as_ref().map_or(0, |i| i.done);
    Ok(TrialReport {
        schema: REPORT_SCHEMA,
        scenario: s.name.clone(),
        seed: s.seed,
        algorithm: s.ao,
        injected: spoofed + flood_attempts,
        spoofed,
        flood_attempts,
        accepted_by_receiver: breakdown.accepted,
        injected_breakdown: breakdown,
        auth_drops,
        responses_observed_by_attacker: responses,
        transfer_ok: ever_established && received == payload,
        elapsed_us: now,
        bytes_sent: payload.len() as u64,
        bytes_received: received.len() as u64,
        sender_sha256: sha256_hex(&payload),
        receiver_sha256: sha256_hex(&received),
        connections_allocated: lstats.connections_allocated,
        guard_rejections: lstats.guard_rejections,
        guard_rejection_reasons: lstats.rejections,
        nonce_cache_len: listener.guard().seen_nonces.len(),
        nonce_cache_capacity: listener.guard().seen_nonces.capacity(),
        receiver: receiver_stats.as_ref().map(|r| ReceiverDigest::capture(r, &received)),
        sender_stats,
        receiver_stats,
        forward_channel: forward.stats().clone(),
        reverse_channel: reverse.stats().clone(),
    })
}
