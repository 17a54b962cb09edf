use crate::checksum::{build_pseudo_header, frame_udp, verify_udp_checksum, UDP_HEADER_LEN};
use crate::engine::Datagram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelPolicy {
    pub loss_prob: f64,
    pub dup_prob: f64,
    /// Largest number of queued datagrams a new one may overtake.
    pub reorder_window: u32,
    pub base_delay_us: u64,
    /// Chance that an on-path modifier flips one bit and repairs the UDP checksum.
    pub tamper_prob: f64,
    pub seed: u64,
}

impl Default for ChannelPolicy {
    fn default() -> Self {
        ChannelPolicy {
            loss_prob: 0.0,
            dup_prob: 0.0,
            reorder_window: 0,
            base_delay_us: 1_000,
            tamper_prob: 0.0,
            seed: 0,
        }
    }
}

impl ChannelPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("loss_prob", self.loss_prob),
            ("dup_prob", self.dup_prob),
            ("tamper_prob", self.tamper_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within 0..=1, got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub offered: u64,
    pub lost: u64,
    pub duplicated: u64,
    pub reordered: u64,
    pub tampered: u64,
    pub checksum_failures: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone)]
struct InFlight {
    due_us: u64,
    src: std::net::SocketAddrV4,
    dst: std::net::SocketAddrV4,
    udp: Vec<u8>,
}

/// One direction of a simulated path. Datagrams travel as full UDP images
/// and are checksum-verified on delivery.
///
/// Delivery order is queue order; a datagram that overtakes others also
/// holds them back until its own due time, which keeps the order a pure
/// function of the seed and the send schedule.
#[derive(Debug, Clone)]
pub struct Channel {
    policy: ChannelPolicy,
    rng: ChaCha8Rng,
    queue: VecDeque<InFlight>,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(policy: ChannelPolicy) -> Self {
        Channel {
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            policy,
            queue: VecDeque::new(),
            stats: ChannelStats::default(),
        }
    }

    pub fn policy(&self) -> &ChannelPolicy {
        &self.policy
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn send(&mut self, now_us: u64, dgram: Datagram) {
        self.stats.offered += 1;
        if self.policy.loss_prob > 0.0 && self.rng.random_bool(self.policy.loss_prob) {
            self.stats.lost += 1;
            return;
        }
        let copies = if self.policy.dup_prob > 0.0 && self.rng.random_bool(self.policy.dup_prob) {
            self.stats.duplicated += 1;
            2
        } else {
            1
        };
        let mut bytes = dgram.bytes;
        if self.policy.tamper_prob > 0.0 && !bytes.is_empty() && self.rng.random_bool(self.policy.tamper_prob) {
            let bit = self.rng.random_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 0x80 >> (bit % 8);
            self.stats.tampered += 1;
        }
        let udp = frame_udp(dgram.src, dgram.dst, &bytes).expect("datagram within UDP limits");
        for _ in 0..copies {
            let item = InFlight {
                due_us: now_us + self.policy.base_delay_us,
                src: dgram.src,
                dst: dgram.dst,
                udp: udp.clone(),
            };
            let max_k = (self.policy.reorder_window as usize).min(self.queue.len());
            let k = if max_k > 0 { self.rng.random_range(0..=max_k) } else { 0 };
            if k > 0 {
                self.stats.reordered += 1;
            }
            self.queue.insert(self.queue.len() - k, item);
        }
    }

    /// Releases every datagram due by `now_us`, in delivery order.
    pub fn deliver_due(&mut self, now_us: u64) -> Vec<Datagram> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|f| f.due_us <= now_us) {
            let item = self.queue.pop_front().unwrap();
            let pseudo = build_pseudo_header(*item.src.ip(), *item.dst.ip(), item.udp.len())
                .expect("framed datagram length fits");
            if !verify_udp_checksum(&pseudo, &item.udp).unwrap_or(false) {
                self.stats.checksum_failures += 1;
                continue;
            }
            self.stats.delivered += 1;
            out.push(Datagram {
                src: item.src,
                dst: item.dst,
                bytes: item.udp[UDP_HEADER_LEN..].to_vec(),
            });
        }
        out
    }

    /// Due time of the next queued datagram.
    pub fn next_due(&self) -> Option<u64> {
        self.queue.front().map(|f| f.due_us)
    }
}

/// Pushes `input` through a fresh channel, sending one datagram per
/// microsecond tick and draining to completion.
pub fn channel_step(policy: &ChannelPolicy, input: Vec<Datagram>) -> Vec<Datagram> {
    let mut ch = Channel::new(policy.clone());
    let mut out = Vec::new();
    for (now, d) in (0u64..).zip(input) {
        ch.send(now, d);
        out.extend(ch.deliver_due(now));
    }
    while let Some(t) = ch.next_due() {
        out.extend(ch.deliver_due(t));
    }
    out
}
