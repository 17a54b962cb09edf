use super::{ChannelPolicy, SpoofProfile, TrialReport};
use crate::auth::DigestAlgorithm;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoofAttack {
    pub count: u64,
    pub profile: SpoofProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodAttack {
    pub attempts: u64,
    pub rate_per_sec: u64,
}

/// Conditions a trial must meet; unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expectations {
    pub transfer_ok: Option<bool>,
    pub accepted_max: Option<u64>,
    pub accepted_min: Option<u64>,
    pub responses_max: Option<u64>,
    pub connections_max: Option<u64>,
    pub guard_rejections_min: Option<u64>,
    pub auth_drops_min: Option<u64>,
    pub auth_drops_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Generated payload size, ignored when `payload_file` is set.
    pub payload_bytes: usize,
    pub payload_file: Option<PathBuf>,
    pub message_size: usize,
    pub ao: Option<DigestAlgorithm>,
    pub key: String,
    /// Receiver key when it differs from the sender's.
    pub receiver_key: Option<String>,
    pub identity: Option<String>,
    pub require_identity: bool,
    pub allowlist: Option<Vec<String>>,
    pub channel: ChannelPolicy,
    pub initial_sequence: Option<u32>,
    pub spoof: Option<SpoofAttack>,
    pub flood: Option<FloodAttack>,
    /// Virtual-time limit for the transfer.
    pub time_limit_us: u64,
    /// Real-time budget; exceeding it aborts the trial.
    pub wall_budget_ms: u64,
    pub expect: Expectations,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "unnamed".into(),
            seed: 1,
            payload_bytes: 64 * 1024,
            payload_file: None,
            message_size: 64 * 1024,
            ao: Some(DigestAlgorithm::Sha256),
            key: "netsim-shared-key".into(),
            receiver_key: None,
            identity: Some("alice".into()),
            require_identity: false,
            allowlist: None,
            channel: ChannelPolicy::default(),
            initial_sequence: None,
            spoof: None,
            flood: None,
            time_limit_us: 120_000_000,
            wall_budget_ms: 60_000,
            expect: Expectations::default(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.replace('_', "").parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn spoof_entry(slot: &mut Option<SpoofAttack>) -> &mut SpoofAttack {
    slot.get_or_insert_with(|| SpoofAttack {
        count: 0,
        profile: SpoofProfile::default(),
    })
}

impl Scenario {
    /// Parses `key = value` lines; `#` starts a comment. Relative
    /// `payload_file` paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::default();
        let mut spoof: Option<SpoofAttack> = None;
        let mut flood: Option<FloodAttack> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ScenarioError::Syntax { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let result: Result<(), String> = (|| {
                match k {
                    "name" => s.name = v.to_string(),
                    "seed" => s.seed = parse_num(v)?,
                    "payload_bytes" => s.payload_bytes = parse_num(v)?,
                    "payload_file" => {
                        let p = PathBuf::from(v);
                        s.payload_file = Some(match base_dir {
                            Some(d) if p.is_relative() => d.join(p),
                            _ => p,
                        });
                    }
                    "message_size" => s.message_size = parse_num(v)?,
                    "ao" => {
                        if !parse_bool(v)? {
                            s.ao = None;
                        } else if s.ao.is_none() {
                            s.ao = Some(DigestAlgorithm::Sha256);
                        }
                    }
                    "algo" => s.ao = Some(v.parse::<DigestAlgorithm>().map_err(|e| e.to_string())?),
                    "key" => s.key = v.to_string(),
                    "receiver_key" => s.receiver_key = Some(v.to_string()),
                    "identity" => s.identity = if v.is_empty() || v == "none" { None } else { Some(v.to_string()) },
                    "require_identity" => s.require_identity = parse_bool(v)?,
                    "allowlist" => {
                        s.allowlist = Some(v.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
                    }
                    "loss_prob" => s.channel.loss_prob = parse_num(v)?,
                    "dup_prob" => s.channel.dup_prob = parse_num(v)?,
                    "reorder_window" => s.channel.reorder_window = parse_num(v)?,
                    "base_delay_us" => s.channel.base_delay_us = parse_num(v)?,
                    "tamper_prob" => s.channel.tamper_prob = parse_num(v)?,
                    "initial_sequence" => s.initial_sequence = Some(parse_num(v)?),
                    "time_limit_ms" => s.time_limit_us = parse_num::<u64>(v)? * 1000,
                    "wall_budget_ms" => s.wall_budget_ms = parse_num(v)?,
                    "spoof_count" => {
                        spoof_entry(&mut spoof).count = parse_num(v)?;
                    }
                    "spoof_knows_sequence" => {
                        spoof_entry(&mut spoof).profile.knows_sequence = parse_bool(v)?;
                    }
                    "spoof_rate_per_sec" => {
                        spoof_entry(&mut spoof).profile.rate_per_sec = parse_num(v)?;
                    }
                    "spoof_payload" => {
                        spoof_entry(&mut spoof).profile.payload = v.as_bytes().to_vec();
                    }
                    "flood_attempts" => {
                        let rate = flood.as_ref().map_or(100_000, |f| f.rate_per_sec);
                        flood = Some(FloodAttack {
                            attempts: parse_num(v)?,
                            rate_per_sec: rate,
                        });
                    }
                    "flood_rate_per_sec" => {
                        let attempts = flood.as_ref().map_or(0, |f| f.attempts);
                        flood = Some(FloodAttack {
                            attempts,
                            rate_per_sec: parse_num(v)?,
                        });
                    }
                    "expect_transfer_ok" => s.expect.transfer_ok = Some(parse_bool(v)?),
                    "expect_accepted_max" => s.expect.accepted_max = Some(parse_num(v)?),
                    "expect_accepted_min" => s.expect.accepted_min = Some(parse_num(v)?),
                    "expect_responses_max" => s.expect.responses_max = Some(parse_num(v)?),
                    "expect_connections_max" => s.expect.connections_max = Some(parse_num(v)?),
                    "expect_guard_rejections_min" => s.expect.guard_rejections_min = Some(parse_num(v)?),
                    "expect_auth_drops_min" => s.expect.auth_drops_min = Some(parse_num(v)?),
                    "expect_auth_drops_max" => s.expect.auth_drops_max = Some(parse_num(v)?),
                    _ => return Err(format!("unknown key {k:?}")),
                }
                Ok(())
            })();
            result.map_err(syntax)?;
        }
        s.spoof = spoof;
        s.flood = flood;
        s.channel.seed = s.seed;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        self.channel.validate().map_err(ScenarioError::Invalid)?;
        if self.message_size == 0 {
            return invalid("message_size must be positive".into());
        }
        if self.require_identity && self.identity.is_none() && self.flood.is_none() {
            return invalid("require_identity with no identity leaves nothing to transfer".into());
        }
        if let Some(seq) = self.initial_sequence {
            if seq > crate::seq::MAX_SEQ {
                return invalid(format!("initial_sequence {seq} exceeds 2^31-1"));
            }
        }
        for k in std::iter::once(&self.key).chain(self.receiver_key.as_ref()) {
            crate::auth::Password::new(k.as_bytes()).map_err(|e| ScenarioError::Invalid(format!("key: {e}")))?;
        }
        if let Some(s) = &self.spoof {
            if s.profile.rate_per_sec == 0 {
                return invalid("spoof_rate_per_sec must be positive".into());
            }
            if s.profile.payload.len() > crate::engine::MAX_PAYLOAD {
                return invalid("spoof_payload exceeds one packet".into());
            }
        }
        if let Some(f) = &self.flood {
            if f.rate_per_sec == 0 {
                return invalid("flood_rate_per_sec must be positive".into());
            }
        }
        Ok(())
    }

    /// Returns a description of every unmet expectation.
    pub fn check(&self, r: &TrialReport) -> Vec<String> {
        let e = &self.expect;
        let mut failed = Vec::new();
        let mut check = |ok: bool, what: String| {
            if !ok {
                failed.push(what);
            }
        };
        if let Some(want) = e.transfer_ok {
            check(r.transfer_ok == want, format!("transfer_ok = {} (want {want})", r.transfer_ok));
        }
        if let Some(max) = e.accepted_max {
            check(r.accepted_by_receiver <= max, format!("accepted_by_receiver = {} (max {max})", r.accepted_by_receiver));
        }
        if let Some(min) = e.accepted_min {
            check(r.accepted_by_receiver >= min, format!("accepted_by_receiver = {} (min {min})", r.accepted_by_receiver));
        }
        if let Some(max) = e.responses_max {
            check(
                r.responses_observed_by_attacker <= max,
                format!("responses_observed_by_attacker = {} (max {max})", r.responses_observed_by_attacker),
            );
        }
        if let Some(max) = e.connections_max {
            check(
                r.connections_allocated <= max,
                format!("connections_allocated = {} (max {max})", r.connections_allocated),
            );
        }
        if let Some(min) = e.guard_rejections_min {
            check(r.guard_rejections >= min, format!("guard_rejections = {} (min {min})", r.guard_rejections));
        }
        if let Some(min) = e.auth_drops_min {
            check(r.auth_drops >= min, format!("auth_drops = {} (min {min})", r.auth_drops));
        }
        if let Some(max) = e.auth_drops_max {
            check(r.auth_drops <= max, format!("auth_drops = {} (max {max})", r.auth_drops));
        }
        failed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_scenario() {
        let s = Scenario::parse(
            "# comment\nname = spoof\nseed=7\nalgo = md5\nloss_prob = 0.1 # trailing\nspoof_count = 10_000\n\
             spoof_knows_sequence = true\nexpect_accepted_max = 0\nallowlist = alice, bob\n",
            None,
        )
        .unwrap();
        assert_eq!(s.name, "spoof");
        assert_eq!(s.ao, Some(DigestAlgorithm::Md5));
        assert_eq!(s.channel.seed, 7);
        assert_eq!(s.spoof.as_ref().unwrap().count, 10_000);
        assert_eq!(s.allowlist, Some(vec!["alice".to_string(), "bob".to_string()]));
        assert_eq!(s.expect.accepted_max, Some(0));
    }

    #[test]
    fn ao_off_then_algo() {
        let s = Scenario::parse("ao = off\n", None).unwrap();
        assert_eq!(s.ao, None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Scenario::parse("loss_prob = 2.0", None), Err(ScenarioError::Invalid(_))));
        assert!(matches!(Scenario::parse("bogus = 1", None), Err(ScenarioError::Syntax { line: 1, .. })));
        assert!(matches!(Scenario::parse("\nno equals sign", None), Err(ScenarioError::Syntax { line: 2, .. })));
        assert!(matches!(Scenario::parse("algo = sha512", None), Err(ScenarioError::Syntax { .. })));
        assert!(matches!(Scenario::parse("key = \u{7f}bad", None), Err(ScenarioError::Invalid(_))));
    }
}
