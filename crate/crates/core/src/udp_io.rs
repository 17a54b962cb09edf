//! Real UDP transport for the engine.
//!
//! [`UdpEndpoint`] is a thin IPv4 socket wrapper. [`run_sender`] and
//! [`run_receiver`] drive a [`Connection`] or [`Listener`] from a
//! monotonic clock, feeding it the same events the simulator does.

use crate::engine::{Connection, ConnectionConfig, ConnectionStats, Datagram, Listener, ListenerConfig, ListenerStats, Phase};
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, SocketAddrV4, UdpSocket};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

/// Largest UDP payload over IPv4.
pub const MAX_UDP_PAYLOAD: usize = 65_507;
/// Upper bound on one blocking wait so timers stay responsive.
const MAX_WAIT: Duration = Duration::from_millis(50);
/// Packets kept queued in the engine ahead of the pacer.
const FEED_AHEAD_PACKETS: u32 = 1024;

#[derive(Debug, Error)]
pub enum UdpIoError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddrV4,
        #[source]
        source: io::Error,
    },
    #[error("datagram of {0} bytes exceeds the 65507-byte UDP limit")]
    OversizeDatagram(usize),
    #[error("IPv6 peers are not supported")]
    Ipv6,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub struct UdpEndpoint {
    socket: UdpSocket,
    local: SocketAddrV4,
    nonblocking: bool,
}

fn v4(addr: SocketAddr) -> Result<SocketAddrV4, UdpIoError> {
    match addr {
        SocketAddr::V4(a) => Ok(a),
        SocketAddr::V6(_) => Err(UdpIoError::Ipv6),
    }
}

impl UdpEndpoint {
    pub fn bind(addr: SocketAddrV4) -> Result<Self, UdpIoError> {
        let socket = UdpSocket::bind(addr).map_err(|source| UdpIoError::Bind { addr, source })?;
        let local = v4(socket.local_addr()?)?;
        Ok(UdpEndpoint {
            socket,
            local,
            nonblocking: false,
        })
    }

    /// Restricts the endpoint to `peer` and learns the concrete local
    /// address the OS routes through, which the pseudo-header needs.
    pub fn connect(&mut self, peer: SocketAddrV4) -> Result<SocketAddrV4, UdpIoError> {
        self.socket.connect(peer)?;
        self.local = v4(self.socket.local_addr()?)?;
        Ok(self.local)
    }

    pub fn local_addr(&self) -> SocketAddrV4 {
        self.local
    }

    pub fn send_datagram(&self, peer: SocketAddrV4, bytes: &[u8]) -> Result<usize, UdpIoError> {
        if bytes.len() > MAX_UDP_PAYLOAD {
            return Err(UdpIoError::OversizeDatagram(bytes.len()));
        }
        Ok(self.socket.send_to(bytes, peer)?)
    }

    /// Waits up to `timeout` for one datagram. A zero timeout only checks
    /// what is already queued.
    pub fn poll_datagram(&mut self, timeout: Duration) -> Result<Option<(SocketAddrV4, Vec<u8>)>, UdpIoError> {
        let want_nonblocking = timeout.is_zero();
        if want_nonblocking != self.nonblocking {
            self.socket.set_nonblocking(want_nonblocking)?;
            self.nonblocking = want_nonblocking;
        }
        if !want_nonblocking {
            self.socket.set_read_timeout(Some(timeout))?;
        }
        let mut buf = vec![0u8; MAX_UDP_PAYLOAD];
        match self.socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                buf.truncate(n);
                match from {
                    SocketAddr::V4(a) => Ok(Some((a, buf))),
                    SocketAddr::V6(_) => Ok(None),
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(None),
            // A previous send to a closed port surfaces here on some platforms.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn send_all(&self, out: Vec<Datagram>) -> Result<(), UdpIoError> {
        for d in out {
            match self.send_datagram(d.dst, &d.bytes) {
                Ok(_) => {}
                Err(UdpIoError::Io(e)) if e.kind() == ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Clock(Instant);

impl Clock {
    fn now_us(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }

    fn wait_until(&self, deadline_us: u64) -> Duration {
        Duration::from_micros(deadline_us.saturating_sub(self.now_us())).min(MAX_WAIT)
    }
}

#[derive(Debug, Clone)]
pub struct SendOutcome {
    pub stats: ConnectionStats,
    pub established: bool,
    /// Every message was acknowledged and the shutdown sent.
    pub completed: bool,
    pub elapsed: Duration,
}

/// Sends `messages` to `peer` and returns once all are acknowledged, the
/// connection fails, or `timeout` passes.
pub fn run_sender<I>(
    endpoint: &mut UdpEndpoint,
    peer: SocketAddrV4,
    mut cfg: ConnectionConfig,
    messages: I,
    timeout: Duration,
) -> Result<SendOutcome, UdpIoError>
where
    I: IntoIterator<Item = Vec<u8>>,
{
    cfg.epoch_ms = unix_ms();
    let clock = Clock(Instant::now());
    let local = endpoint.local_addr();
    let (mut conn, first) = Connection::open(cfg, local, peer, 0, &mut rand::rng())
        .map_err(|e| io::Error::new(ErrorKind::InvalidInput, e.to_string()))?;
    endpoint.send_all(first)?;
    let mut messages = messages.into_iter().peekable();
    let mut established = false;
    let mut completed = false;
    let deadline = timeout.as_micros() as u64;
    loop {
        let now = clock.now_us();
        if now >= deadline || conn.phase() == Phase::Closed {
            break;
        }
        while conn.queued_packets() < FEED_AHEAD_PACKETS {
            let Some(m) = messages.next() else { break };
            let out = conn
                .send_message(&m, true)
                .map_err(|e| io::Error::new(ErrorKind::BrokenPipe, e.to_string()))?;
            endpoint.send_all(out)?;
        }
        endpoint.send_all(conn.tick(now))?;
        established |= conn.phase() == Phase::Established;
        if established && messages.peek().is_none() && conn.all_acknowledged() {
            endpoint.send_all(conn.close())?;
            completed = true;
            break;
        }
        let wait = clock.wait_until(conn.next_wakeup().min(deadline));
        if let Some((src, bytes)) = endpoint.poll_datagram(wait)? {
            let d = Datagram { src, dst: local, bytes };
            let h = conn.handle_datagram(clock.now_us(), &d);
            endpoint.send_all(h.out)?;
        }
    }
    Ok(SendOutcome {
        stats: conn.stats().clone(),
        established,
        completed,
        elapsed: clock.0.elapsed(),
    })
}

#[derive(Debug, Clone)]
pub struct ReceiveOutcome {
    pub listener: ListenerStats,
    /// Counters of the first accepted connection.
    pub connection: Option<ConnectionStats>,
    pub peer: Option<SocketAddrV4>,
    /// The first connection was closed by its peer.
    pub completed: bool,
    pub elapsed: Duration,
}

/// Accepts one transfer on `endpoint`, passing each delivered message of
/// the first accepted connection to `sink`. Returns when that connection
/// closes, or when `accept_timeout` passes with nothing accepted.
pub fn run_receiver<F>(
    endpoint: &mut UdpEndpoint,
    mut cfg: ListenerConfig,
    accept_timeout: Option<Duration>,
    mut sink: F,
) -> Result<ReceiveOutcome, UdpIoError>
where
    F: FnMut(&[u8]) -> io::Result<()>,
{
    cfg.connection.epoch_ms = unix_ms();
    let clock = Clock(Instant::now());
    let local = endpoint.local_addr();
    let mut listener = Listener::new(cfg, rand::random())
        .map_err(|e| io::Error::new(ErrorKind::InvalidInput, e.to_string()))?;
    let mut first: Option<u32> = None;
    let accept_deadline = accept_timeout.map(|t| t.as_micros() as u64);
    let mut completed = false;
    loop {
        let now = clock.now_us();
        endpoint.send_all(listener.tick(now))?;
        if first.is_none() {
            first = listener.accept();
            if let Some(id) = first {
                log::info!("accepted transfer from {}", listener.connection(id).unwrap().peer_addr());
            }
        }
        while listener.accept().is_some() {}
        if let Some(conn) = first.and_then(|id| listener.connection_mut(id)) {
            while let Some(m) = conn.recv_message() {
                sink(&m)?;
            }
            if conn.phase() == Phase::Closed {
                completed = conn.close_reason() == Some(crate::engine::CloseReason::PeerShutdown);
                break;
            }
        } else if accept_deadline.is_some_and(|d| now >= d) {
            break;
        }
        let mut wake = listener.next_wakeup();
        if first.is_none() {
            if let Some(d) = accept_deadline {
                wake = wake.min(d);
            }
        }
        let wait = clock.wait_until(wake);
        if let Some((src, bytes)) = endpoint.poll_datagram(wait)? {
            let d = Datagram { src, dst: local, bytes };
            let h = listener.handle_datagram(clock.now_us(), &d);
            endpoint.send_all(h.out)?;
        }
    }
    let conn = first.and_then(|id| listener.connection(id));
    Ok(ReceiveOutcome {
        listener: listener.stats(),
        connection: conn.map(|c| c.stats().clone()),
        peer: conn.map(|c| c.peer_addr()),
        completed,
        elapsed: clock.0.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn lo() -> SocketAddrV4 {
        SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0)
    }

    #[test]
    fn ephemeral_bind_reports_concrete_port() {
        let ep = UdpEndpoint::bind(lo()).unwrap();
        assert_ne!(ep.local_addr().port(), 0);
        assert_eq!(*ep.local_addr().ip(), Ipv4Addr::LOCALHOST);
    }

    #[test]
    fn double_bind_fails() {
        let ep = UdpEndpoint::bind(lo()).unwrap();
        assert!(matches!(UdpEndpoint::bind(ep.local_addr()), Err(UdpIoError::Bind { .. })));
    }

    #[test]
    fn loopback_roundtrip_including_empty() {
        let a = UdpEndpoint::bind(lo()).unwrap();
        let mut b = UdpEndpoint::bind(lo()).unwrap();
        let payload: Vec<u8> = (0..1400).map(|i| i as u8).collect();
        assert_eq!(a.send_datagram(b.local_addr(), &payload).unwrap(), 1400);
        let (from, got) = b.poll_datagram(Duration::from_secs(2)).unwrap().unwrap();
        assert_eq!(got, payload);
        assert_eq!(from, a.local_addr());
        a.send_datagram(b.local_addr(), &[]).unwrap();
        let (_, got) = b.poll_datagram(Duration::from_secs(2)).unwrap().unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn oversize_rejected() {
        let a = UdpEndpoint::bind(lo()).unwrap();
        assert!(matches!(
            a.send_datagram(a.local_addr(), &vec![0u8; 70_000]),
            Err(UdpIoError::OversizeDatagram(70_000))
        ));
    }

    #[test]
    fn poll_times_out() {
        let mut a = UdpEndpoint::bind(lo()).unwrap();
        let t = Instant::now();
        assert!(a.poll_datagram(Duration::from_millis(10)).unwrap().is_none());
        assert!(t.elapsed() >= Duration::from_millis(10));
        assert!(a.poll_datagram(Duration::ZERO).unwrap().is_none());
    }

    #[test]
    fn connect_learns_local_address() {
        let peer = UdpEndpoint::bind(lo()).unwrap();
        let mut ep = UdpEndpoint::bind(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0)).unwrap();
        let local = ep.connect(peer.local_addr()).unwrap();
        assert_eq!(*local.ip(), Ipv4Addr::LOCALHOST);
    }
}
