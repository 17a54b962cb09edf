use crate::{AuthArgs, RecvArgs, SendArgs, SimulateArgs, EXIT_FAILURE, EXIT_KEY, EXIT_OK, EXIT_USAGE};
use serde_json::{json, Value};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::time::Duration;
use udt_armor::auth::{load_key, Password};
use udt_armor::identity::{parse_allowlist, GuardMode, GuardPolicy};
use udt_armor::netsim::{run_trial, sha256_hex, Scenario, TrialError, REPORT_SCHEMA};
use udt_armor::udp_io::{run_receiver, run_sender, UdpEndpoint};
use udt_armor::{ConnectionConfig, DigestAlgorithm, ListenerConfig};

/// Application message size for file transfers.
const CHUNK: usize = 64 * 1024;
/// The first message of a transfer carries the file length.
const LENGTH_HEADER: usize = 8;

type Outcome<T> = Result<T, u8>;

fn usage(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn failure(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    EXIT_FAILURE
}

fn resolve_key(auth: &AuthArgs, needed_for: Option<&str>) -> Outcome<Option<Password>> {
    match &auth.key_file {
        Some(path) => load_key(path).map(Some).map_err(|e| {
            eprintln!("error: {e}");
            EXIT_KEY
        }),
        None if auth.ao_enabled() => Err(usage("--key-file is required unless --no-ao is given")),
        None => match needed_for {
            Some(what) => Err(usage(format!("{what} needs --key-file"))),
            None => Ok(None),
        },
    }
}

fn ao(auth: &AuthArgs) -> Option<DigestAlgorithm> {
    auth.ao_enabled().then(|| auth.algo.into())
}

fn emit(report: &Value, path: Option<&Path>) -> Outcome<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    println!("{text}");
    if let Some(p) = path {
        std::fs::write(p, format!("{text}\n")).map_err(|e| failure(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn to_code(r: Outcome<()>) -> u8 {
    r.err().unwrap_or(EXIT_OK)
}

pub fn send(args: SendArgs) -> u8 {
    to_code(send_inner(args))
}

fn send_inner(args: SendArgs) -> Outcome<()> {
    let password = resolve_key(&args.auth, args.identity.as_ref().map(|_| "--identity"))?;
    let data = std::fs::read(&args.file).map_err(|e| failure(format!("cannot read {}: {e}", args.file.display())))?;
    let digest = sha256_hex(&data);

    let bind = args.bind.unwrap_or(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0));
    let mut endpoint = UdpEndpoint::bind(bind).map_err(failure)?;
    endpoint.connect(args.peer).map_err(failure)?;

    let cfg = ConnectionConfig {
        password,
        ao: ao(&args.auth),
        identity: args.identity.clone(),
        identity_algorithm: args.auth.algo.into(),
        ..ConnectionConfig::default()
    };
    let header = (data.len() as u64).to_be_bytes().to_vec();
    let messages = std::iter::once(header).chain(data.chunks(CHUNK).map(<[u8]>::to_vec));
    log::info!("sending {} bytes to {} from {}", data.len(), args.peer, endpoint.local_addr());
    let out = run_sender(&mut endpoint, args.peer, cfg, messages, Duration::from_secs(args.timeout_secs))
        .map_err(failure)?;

    emit(
        &json!({
            "schema": REPORT_SCHEMA,
            "role": "send",
            "peer": args.peer.to_string(),
            "established": out.established,
            "completed": out.completed,
            "bytes": data.len(),
            "sha256": digest,
            "elapsed_ms": out.elapsed.as_millis() as u64,
            "connection": out.stats,
        }),
        args.stats_json.as_deref(),
    )?;
    if !out.established {
        return Err(failure("no connection established"));
    }
    if !out.completed {
        return Err(failure("transfer did not complete"));
    }
    Ok(())
}

fn read_allowlist(path: &Path) -> Outcome<GuardPolicy> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(GuardPolicy::new(GuardMode::Allowlist(parse_allowlist(&text))))
}

pub fn recv(args: RecvArgs) -> u8 {
    to_code(recv_inner(args))
}

fn recv_inner(args: RecvArgs) -> Outcome<()> {
    if args.listen.ip().is_unspecified() {
        return Err(usage("--listen needs a concrete IPv4 address, not 0.0.0.0"));
    }
    let needs = if args.require_identity {
        Some("--require-identity")
    } else if args.allowlist.is_some() {
        Some("--allowlist")
    } else {
        None
    };
    let password = resolve_key(&args.auth, needs)?;
    let guard = match &args.allowlist {
        Some(p) => read_allowlist(p)?,
        None => GuardPolicy::allow_all(),
    };
    let cfg = ListenerConfig {
        connection: ConnectionConfig {
            password,
            ao: ao(&args.auth),
            ..ConnectionConfig::default()
        },
        require_identity: args.require_identity,
        guard,
        ..ListenerConfig::default()
    };

    let mut endpoint = UdpEndpoint::bind(args.listen).map_err(failure)?;
    log::info!("listening on {}", endpoint.local_addr());
    let mut expected: Option<u64> = None;
    let mut received = Vec::new();
    let out = run_receiver(
        &mut endpoint,
        cfg,
        args.accept_timeout_secs.map(Duration::from_secs),
        |m| {
            if expected.is_none() {
                let header: [u8; LENGTH_HEADER] = m
                    .try_into()
                    .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad length header"))?;
                expected = Some(u64::from_be_bytes(header));
            } else {
                received.extend_from_slice(m);
            }
            Ok(())
        },
    )
    .map_err(failure)?;

    let complete = out.completed && expected == Some(received.len() as u64);
    if complete {
        std::fs::write(&args.output, &received)
            .map_err(|e| failure(format!("cannot write {}: {e}", args.output.display())))?;
    }
    emit(
        &json!({
            "schema": REPORT_SCHEMA,
            "role": "recv",
            "peer": out.peer.map(|p| p.to_string()),
            "completed": complete,
            "expected_bytes": expected,
            "bytes": received.len(),
            "sha256": sha256_hex(&received),
            "elapsed_ms": out.elapsed.as_millis() as u64,
            "listener": out.listener,
            "connection": out.connection,
        }),
        args.stats_json.as_deref(),
    )?;
    match (out.peer, complete) {
        (None, _) => Err(failure("nothing connected")),
        (Some(_), false) => Err(failure("transfer incomplete")),
        _ => Ok(()),
    }
}

pub fn simulate(args: SimulateArgs) -> u8 {
    to_code(simulate_inner(args))
}

fn simulate_inner(args: SimulateArgs) -> Outcome<()> {
    let scenario = Scenario::load(&args.scenario).map_err(usage)?;
    scenario.validate().map_err(usage)?;
    let report = match run_trial(&scenario) {
        Ok(r) => r,
        Err(TrialError::Scenario(e)) => return Err(usage(e)),
        Err(e) => return Err(failure(e)),
    };
    let failed = scenario.check(&report);
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["expectations_met"] = json!(failed.is_empty());
    value["failed_expectations"] = json!(failed);
    emit(&value, args.stats_json.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            eprintln!("expectation failed: {f}");
        }
        Err(EXIT_FAILURE)
    }
}
