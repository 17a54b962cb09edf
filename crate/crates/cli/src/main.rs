//! `udt-armor`: authenticated file transfer over UDP and scripted attack
//! simulations.
//!
//! Exit codes: 0 success, 1 transfer or expectation failure, 2 usage or
//! scenario error, 3 key error.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::net::SocketAddrV4;
use std::path::PathBuf;
use std::process::ExitCode;
use udt_armor::DigestAlgorithm;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_KEY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "udt-armor", version, about = "Reliable UDP transfer with per-segment authentication")]
struct Cli {
    /// Increase log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Send a file to a listening peer.
    Send(SendArgs),
    /// Receive one file.
    Recv(RecvArgs),
    /// Run a netsim scenario and print its report.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Algo {
    Md5,
    Sha1,
    Sha256,
}

impl From<Algo> for DigestAlgorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Md5 => DigestAlgorithm::Md5,
            Algo::Sha1 => DigestAlgorithm::Sha1,
            Algo::Sha256 => DigestAlgorithm::Sha256,
        }
    }
}

#[derive(Debug, Args)]
struct AuthArgs {
    /// File holding the shared password (printable ASCII, 1..=128 bytes).
    #[arg(long, value_name = "PATH")]
    key_file: Option<PathBuf>,
    /// Digest algorithm for segment authentication.
    #[arg(long, value_enum, default_value = "sha256")]
    algo: Algo,
    /// Authenticate every segment (default).
    #[arg(long, overrides_with = "no_ao")]
    ao: bool,
    /// Disable segment authentication.
    #[arg(long)]
    no_ao: bool,
}

impl AuthArgs {
    fn ao_enabled(&self) -> bool {
        !self.no_ao
    }
}

#[derive(Debug, Args)]
struct SendArgs {
    /// Receiver address.
    #[arg(long)]
    peer: SocketAddrV4,
    /// Local address; defaults to an ephemeral port on the route to the peer.
    #[arg(long)]
    bind: Option<SocketAddrV4>,
    #[command(flatten)]
    auth: AuthArgs,
    /// Principal announced in the first packet.
    #[arg(long, value_name = "NAME")]
    identity: Option<String>,
    /// Give up after this many seconds.
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// Also write the stats JSON here.
    #[arg(long, value_name = "PATH")]
    stats_json: Option<PathBuf>,
    /// File to send.
    file: PathBuf,
}

#[derive(Debug, Args)]
struct RecvArgs {
    /// Local address to listen on; must be a concrete IPv4 address.
    #[arg(long)]
    listen: SocketAddrV4,
    #[command(flatten)]
    auth: AuthArgs,
    /// Refuse handshakes not preceded by an accepted identity.
    #[arg(long)]
    require_identity: bool,
    /// Only admit principals listed in this file.
    #[arg(long, value_name = "FILE")]
    allowlist: Option<PathBuf>,
    /// Where to write the received file.
    #[arg(long, short)]
    output: PathBuf,
    /// Stop if nothing connects within this many seconds.
    #[arg(long)]
    accept_timeout_secs: Option<u64>,
    #[arg(long, value_name = "PATH")]
    stats_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario file of key=value lines.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_name = "PATH")]
    stats_json: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    init_logging(cli.verbose);
    let code = match cli.command {
        Command::Send(a) => commands::send(a),
        Command::Recv(a) => commands::recv(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    ExitCode::from(code)
}
