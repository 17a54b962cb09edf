use super::*;
use crate::auth::{self, ConnectionKey, KeyMaterial};
use crate::identity::{parse_identity_packet, GuardPolicy};
use crate::wire::{decode_packet, encode_packet, Boundary, ControlPacket, ControlType, DataPacketHeader, Packet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::net::{Ipv4Addr, SocketAddrV4};

const A: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 1), 5000);
const B: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 2), 9000);

fn seq(v: u32) -> SequenceNumber {
    SequenceNumber::wrapping(v)
}

fn pw() -> Password {
    Password::new("s3cret-shared-key").unwrap()
}

fn plain(isn: u32) -> ConnectionConfig {
    ConnectionConfig {
        initial_sequence: Some(seq(isn)),
        ..ConnectionConfig::default()
    }
}

fn secured(alg: DigestAlgorithm, isn: u32) -> ConnectionConfig {
    ConnectionConfig {
        password: Some(pw()),
        ao: Some(alg),
        identity: Some("alice".into()),
        initial_sequence: Some(seq(isn)),
        ..ConnectionConfig::default()
    }
}

fn listener(conn: ConnectionConfig, require_identity: bool) -> Listener {
    Listener::new(
        ListenerConfig {
            connection: conn,
            require_identity,
            guard: GuardPolicy::allow_all(),
            ..ListenerConfig::default()
        },
        7,
    )
    .unwrap()
}

/// Opens `init` against `l` over a perfect channel; returns the responder id.
fn establish(init: ConnectionConfig, l: &mut Listener) -> (Connection, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut c, out) = Connection::open(init, A, B, 0, &mut rng).unwrap();
    let mut back = Vec::new();
    for d in &out {
        back.extend(l.handle_datagram(0, d).out);
    }
    for d in &back {
        c.handle_datagram(0, d);
    }
    assert_eq!(c.phase(), Phase::Established);
    (c, l.accept().expect("responder allocated"))
}

/// Runs both ends over a channel that drops datagrams for which `drop`
/// returns true, until `done` or the time limit.
fn run(
    c: &mut Connection,
    l: &mut Listener,
    mut now: u64,
    limit: u64,
    mut drop: impl FnMut(&Datagram) -> bool,
    mut done: impl FnMut(&Connection, &Listener) -> bool,
) -> u64 {
    let mut to_l: Vec<Datagram> = Vec::new();
    let mut to_c: Vec<Datagram> = Vec::new();
    while now < limit && !done(c, l) {
        for d in std::mem::take(&mut to_l) {
            if !drop(&d) {
                to_c.extend(l.handle_datagram(now, &d).out);
            }
        }
        for d in std::mem::take(&mut to_c) {
            if !drop(&d) {
                to_l.extend(c.handle_datagram(now, &d).out);
            }
        }
        to_l.extend(c.tick(now));
        to_c.extend(l.tick(now));
        if to_l.is_empty() && to_c.is_empty() {
            now = c.next_wakeup().min(l.next_wakeup()).max(now + 1);
        } else {
            now += 50;
        }
    }
    now
}

fn data_from(src: SocketAddrV4, dst: SocketAddrV4, dest_id: u32, s: u32, boundary: Boundary, payload: &[u8]) -> Datagram {
    let bytes = encode_packet(&Packet::Data {
        header: DataPacketHeader {
            sequence: s,
            boundary,
            in_order: true,
            message_number: 0,
            timestamp_us: 0,
            dest_socket_id: dest_id,
        },
        payload: payload.to_vec(),
    })
    .unwrap();
    Datagram { src, dst, bytes }
}

fn control_from(src: SocketAddrV4, dst: SocketAddrV4, pkt: ControlPacket) -> Datagram {
    Datagram {
        src,
        dst,
        bytes: encode_packet(&Packet::Control(pkt)).unwrap(),
    }
}

fn decode_plain(d: &Datagram) -> Packet {
    decode_packet(&d.bytes).unwrap()
}

#[test]
fn next_sequence_wraps() {
    assert_eq!(crate::seq::next_sequence(seq(5)), seq(6));
    assert_eq!(crate::seq::next_sequence(SequenceNumber::MAX), seq(0));
}

#[test]
fn first_datagram_is_identity_signed_with_partial_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, out) = Connection::open(secured(DigestAlgorithm::Sha256, 0), A, B, 0, &mut rng).unwrap();
    assert_eq!(c.phase(), Phase::IdentitySent);
    let first = &out[0];
    let (bare, trailer) = crate::wire::strip_ao_trailer_as(&first.bytes, DigestAlgorithm::Sha256).unwrap();
    assert_eq!(trailer.digest.len(), 32);
    let Packet::Control(pkt) = decode_packet(bare).unwrap() else {
        panic!("identity must be a control packet")
    };
    assert_eq!(pkt.ctype, ControlType::UserDefined);
    assert_eq!(pkt.extended_type, 0x0001);
    let record = parse_identity_packet(&pkt).unwrap();
    assert_eq!(record.cookie(), c.local_cookie());
    let mut partial = [0u8; 16];
    partial[..8].copy_from_slice(&c.local_cookie());
    let key = KeyMaterial {
        password: pw(),
        connection_key: ConnectionKey(partial),
    };
    assert!(auth::open(DigestAlgorithm::Sha256, A, B, &first.bytes, &key).is_ok());
    // Second datagram is the handshake request.
    let bare = crate::wire::strip_ao_trailer_as(&out[1].bytes, DigestAlgorithm::Sha256).unwrap().0;
    let Packet::Control(hs) = decode_packet(bare).unwrap() else { panic!() };
    assert_eq!(hs.ctype, ControlType::Handshake);
}

#[test]
fn ao_without_key_is_a_config_error() {
    let cfg = ConnectionConfig {
        ao: Some(DigestAlgorithm::Md5),
        ..ConnectionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(Connection::open(cfg, A, B, 0, &mut rng), Err(EngineError::Config(_))));
}

#[test]
fn opens_draw_distinct_cookies_and_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut cookies = HashSet::new();
    let mut isns = HashSet::new();
    for _ in 0..1000 {
        let (c, _) = Connection::open(ConnectionConfig::default(), A, B, 0, &mut rng).unwrap();
        cookies.insert(c.local_cookie());
        isns.insert(c.snd_next());
    }
    assert_eq!(cookies.len(), 1000);
    assert_eq!(isns.len(), 1000);
}

#[test]
fn full_exchange_establishes_both_ends_with_shared_key() {
    let mut l = listener(secured(DigestAlgorithm::Sha1, 0), true);
    let (c, id) = establish(secured(DigestAlgorithm::Sha1, 0), &mut l);
    let r = l.connection(id).unwrap();
    assert_eq!(r.phase(), Phase::Established);
    assert_eq!(c.connection_key(), r.connection_key());
    let mut expect = [0u8; 16];
    expect[..8].copy_from_slice(&c.local_cookie());
    expect[8..].copy_from_slice(&r.local_cookie());
    assert_eq!(c.connection_key(), ConnectionKey(expect));
    assert_eq!(c.peer_socket_id(), id);
    assert_eq!(l.stats().connections_allocated, 1);
    assert_eq!(l.stats().guard_accepts, 1);
}

#[test]
fn handshake_without_identity_gets_no_response_and_no_state() {
    let mut l = listener(secured(DigestAlgorithm::Sha256, 0), true);
    let mut cfg = secured(DigestAlgorithm::Sha256, 0);
    cfg.identity = None;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, out) = Connection::open(cfg, A, B, 0, &mut rng).unwrap();
    assert_eq!(out.len(), 1);
    let h = l.handle_datagram(0, &out[0]);
    assert!(h.out.is_empty());
    assert_eq!(h.disposition, Disposition::Rejected(RejectReason::MissingIdentity));
    assert_eq!(l.connection_count(), 0);
    assert_eq!(l.stats().guard_rejections, 1);
}

#[test]
fn unlisted_principal_is_rejected_before_state() {
    let mut l = Listener::new(
        ListenerConfig {
            connection: secured(DigestAlgorithm::Md5, 0),
            require_identity: true,
            guard: GuardPolicy::allowlist(["bob"]),
            ..ListenerConfig::default()
        },
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, out) = Connection::open(secured(DigestAlgorithm::Md5, 0), A, B, 0, &mut rng).unwrap();
    for d in &out {
        assert!(l.handle_datagram(0, d).out.is_empty());
    }
    let s = l.stats();
    assert_eq!(s.rejections.unknown_principal, 1);
    assert_eq!(s.rejections.missing_identity, 1);
    assert_eq!(s.connections_allocated, 0);
}

#[test]
fn advertised_flow_window_is_copied() {
    let mut lcfg = plain(0);
    lcfg.flow_window = 512;
    let mut l = listener(lcfg, false);
    let (c, _) = establish(plain(0), &mut l);
    assert_eq!(c.flow_window(), 512);
}

#[test]
fn retried_handshake_gets_the_same_responder() {
    let mut l = listener(plain(0), false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut c, out) = Connection::open(plain(0), A, B, 0, &mut rng).unwrap();
    let first = l.handle_datagram(0, &out[0]);
    assert_eq!(first.out.len(), 1);
    let retry = c.tick(300_000);
    assert_eq!(retry.len(), 1);
    let second = l.handle_datagram(300_000, &retry[0]);
    assert_eq!(second.disposition, Disposition::Duplicate);
    assert_eq!(second.out.len(), 1);
    assert_eq!(l.connection_count(), 1);
    c.handle_datagram(300_000, &second.out[0]);
    assert_eq!(c.phase(), Phase::Established);
}

#[test]
fn chunking_and_boundaries() {
    let mut l = listener(plain(0), false);
    let (mut c, _) = establish(plain(100), &mut l);
    let out = c.send_message(&[7u8; 1000], true).unwrap();
    assert_eq!(out.len(), 1);
    let Packet::Data { header, .. } = decode_plain(&out[0]) else { panic!() };
    assert_eq!(header.boundary, Boundary::Solo);
    assert_eq!(header.sequence, 100);
    assert_eq!(header.message_number, 0);

    // Let the pacer release all three.
    let mut out = c.send_message(&[9u8; 3000], true).unwrap();
    out.extend(c.tick(5_000));
    let headers: Vec<DataPacketHeader> = out
        .iter()
        .map(|d| match decode_plain(d) {
            Packet::Data { header, .. } => header,
            _ => panic!(),
        })
        .collect();
    assert_eq!(headers.len(), 3);
    assert_eq!(
        headers.iter().map(|h| h.boundary).collect::<Vec<_>>(),
        vec![Boundary::First, Boundary::Middle, Boundary::Last]
    );
    assert_eq!(headers.iter().map(|h| h.sequence).collect::<Vec<_>>(), vec![101, 102, 103]);
    assert!(headers.iter().all(|h| h.message_number == 1));
}

#[test]
fn consecutive_messages_reassemble_in_order() {
    let mut l = listener(plain(0), false);
    let (mut c, id) = establish(plain(0), &mut l);
    let msgs: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i; 500 + i as usize * 300]).collect();
    for m in &msgs {
        c.send_message(m, true).unwrap();
    }
    run(&mut c, &mut l, 0, 5_000_000, |_| false, |c, _| c.all_acknowledged());
    let r = l.connection_mut(id).unwrap();
    let got: Vec<Vec<u8>> = std::iter::from_fn(|| r.recv_message()).collect();
    assert_eq!(got, msgs);
}

#[test]
fn gap_triggers_nak_with_missing_range() {
    let mut l = listener(plain(0), false);
    let (_c, id) = establish(plain(10), &mut l);
    let h = l.handle_datagram(10, &data_from(A, B, id, 10, Boundary::Solo, b"x"));
    assert_eq!(h.disposition, Disposition::Accepted);
    assert_eq!(l.connection(id).unwrap().rcv_expected(), seq(11));
    let h = l.handle_datagram(20, &data_from(A, B, id, 14, Boundary::Solo, b"y"));
    assert_eq!(h.out.len(), 1);
    let Packet::Control(nak) = decode_plain(&h.out[0]) else { panic!() };
    assert_eq!(nak.ctype, ControlType::Nak);
    assert_eq!(decode_nak(&nak.control_info).unwrap(), vec![(seq(11), seq(13))]);
    let r = l.connection(id).unwrap();
    assert_eq!(r.receiver_loss_list().ranges(), &[(seq(11), seq(13))]);
    assert_eq!(r.rcv_expected(), seq(15));
}

#[test]
fn duplicate_data_is_counted_and_discarded() {
    let mut l = listener(plain(0), false);
    let (_c, id) = establish(plain(10), &mut l);
    let d = data_from(A, B, id, 10, Boundary::Solo, b"once");
    assert_eq!(l.handle_datagram(1, &d).disposition, Disposition::Accepted);
    assert_eq!(l.handle_datagram(2, &d).disposition, Disposition::Duplicate);
    let r = l.connection_mut(id).unwrap();
    assert_eq!(r.stats().duplicates, 1);
    assert_eq!(r.recv_message().as_deref(), Some(&b"once"[..]));
    assert_eq!(r.recv_message(), None);
}

/// A connected initiator that has transmitted sequences 10..=19 and a raw
/// handle for forging the responder's control packets.
fn sender_with_inflight() -> (Connection, u32) {
    let mut l = listener(plain(0), false);
    let (mut c, id) = establish(plain(10), &mut l);
    let mut sent = c.send_message(&vec![1u8; MAX_PAYLOAD * 10], true).unwrap();
    sent.extend(c.tick(20_000));
    assert_eq!(sent.len(), 10);
    assert_eq!(c.inflight_packets(), 10);
    (c, id)
}

fn nak(ranges: &[(u32, u32)], dest: u32) -> ControlPacket {
    let mut p = ControlPacket::new(ControlType::Nak, dest, 0);
    p.control_info = encode_nak(&ranges.iter().map(|&(a, b)| (seq(a), seq(b))).collect::<Vec<_>>());
    p
}

fn ack(point: u32, window: u32, sub: u32, dest: u32) -> ControlPacket {
    let mut p = ControlPacket::new(ControlType::Ack, dest, 0);
    p.additional_info = sub;
    p.control_info = [point.to_be_bytes(), window.to_be_bytes()].concat();
    p
}

#[test]
fn nak_fills_sender_loss_list_and_merges() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    c.handle_datagram(20_001, &control_from(B, A, nak(&[(10, 12)], me)));
    assert_eq!(c.sender_loss_list().ranges(), &[(seq(10), seq(12))]);
    c.handle_datagram(20_002, &control_from(B, A, nak(&[(11, 14)], me)));
    assert_eq!(c.sender_loss_list().ranges(), &[(seq(10), seq(14))]);
    c.check_invariants().unwrap();
}

#[test]
fn nak_for_unsent_sequence_is_ignored_and_counted() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    let h = c.handle_datagram(20_001, &control_from(B, A, nak(&[(500, 600)], me)));
    assert_eq!(h.disposition, Disposition::Ignored);
    assert!(c.sender_loss_list().is_empty());
    assert_eq!(c.stats().bogus_naks, 1);
}

#[test]
fn retransmission_keeps_original_sequence() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    c.handle_datagram(20_001, &control_from(B, A, nak(&[(12, 12)], me)));
    let out = c.tick(40_000);
    let Packet::Data { header, .. } = decode_plain(&out[0]) else { panic!() };
    assert_eq!(header.sequence, 12);
    assert_eq!(c.stats().retransmitted, 1);
}

#[test]
fn full_ack_slides_window_and_answers_with_ack2() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    let h = c.handle_datagram(20_001, &control_from(B, A, ack(20, 256, 5, me)));
    assert_eq!(c.inflight_packets(), 0);
    assert_eq!(c.flow_window(), 256);
    assert_eq!(h.out.len(), 1);
    let Packet::Control(a2) = decode_plain(&h.out[0]) else { panic!() };
    assert_eq!(a2.ctype, ControlType::Ack2);
    assert_eq!(a2.additional_info, 5);
}

#[test]
fn zero_window_pauses_new_data_but_not_retransmissions() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    c.handle_datagram(20_001, &control_from(B, A, ack(15, 0, 1, me)));
    c.send_message(&[3u8; 100], true).unwrap();
    assert!(c.tick(60_000).iter().all(|d| !matches!(decode_plain(d), Packet::Data { .. })));
    c.handle_datagram(60_001, &control_from(B, A, nak(&[(16, 16)], me)));
    let out = c.tick(80_000);
    let seqs: Vec<u32> = out
        .iter()
        .filter_map(|d| match decode_plain(d) {
            Packet::Data { header, .. } => Some(header.sequence),
            _ => None,
        })
        .collect();
    assert_eq!(seqs, vec![16]);
}

#[test]
fn replayed_ack_changes_nothing() {
    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    c.handle_datagram(20_001, &control_from(B, A, ack(12, 300, 3, me)));
    let before = (c.snd_una(), c.flow_window(), c.inflight_packets());
    let h = c.handle_datagram(20_002, &control_from(B, A, ack(20, 999, 3, me)));
    assert_eq!(h.disposition, Disposition::Ignored);
    assert!(h.out.is_empty());
    assert_eq!((c.snd_una(), c.flow_window(), c.inflight_packets()), before);
    assert_eq!(c.stats().stale_acks, 1);
}

#[test]
fn pacing_rule() {
    let mut l = listener(plain(0), false);
    let (mut c, _) = establish(plain(0), &mut l);
    for k in 1..=5 {
        c.tick(k * RATE_EPOCH_US);
    }
    // Oracle: the stated multiplicative rule.
    let expect = 1000.0 * (7.0f64 / 8.0).powi(5);
    assert!((c.send_period_us() - expect).abs() < 1e-9);
    assert_eq!(c.send_period_us().round(), 513.0);

    let (mut c, _) = sender_with_inflight();
    let me = c.local_socket_id();
    let period = c.send_period_us();
    c.handle_datagram(20_001, &control_from(B, A, nak(&[(10, 10)], me)));
    c.tick(30_000);
    assert!((c.send_period_us() - period * 1.25).abs() < 1e-9);
}

#[test]
fn loss_epoch_from_base_period() {
    let mut l = listener(plain(0), false);
    let (mut c, _) = establish(plain(10), &mut l);
    c.send_message(&[0u8; 10], true).unwrap();
    let me = c.local_socket_id();
    c.handle_datagram(1, &control_from(B, A, nak(&[(10, 10)], me)));
    c.tick(RATE_EPOCH_US);
    assert_eq!(c.send_period_us(), 1250.0);
}

#[test]
fn keepalive_after_idle_second() {
    let mut l = listener(plain(0), false);
    let (mut c, _) = establish(plain(0), &mut l);
    let mut t = 0;
    let mut seen = false;
    while t <= 1_000_000 {
        for d in c.tick(t) {
            if let Packet::Control(p) = decode_plain(&d) {
                seen |= p.ctype == ControlType::Keepalive;
            }
        }
        t += RATE_EPOCH_US;
    }
    assert!(seen);
    assert_eq!(c.stats().keepalives_sent, 1);
}

#[test]
fn close_is_idempotent_and_mirrored() {
    let mut l = listener(plain(0), false);
    let (mut c, id) = establish(plain(0), &mut l);
    let first = c.close();
    assert_eq!(first.len(), 1);
    assert!(c.close().is_empty());
    assert_eq!(c.send_message(b"late", true), Err(EngineError::ConnectionClosed));
    l.handle_datagram(5, &first[0]);
    assert_eq!(l.connection(id).unwrap().phase(), Phase::Closed);
    assert_eq!(l.connection(id).unwrap().close_reason(), Some(CloseReason::PeerShutdown));
}

#[test]
fn tampered_segment_dropped_silently() {
    let mut l = listener(secured(DigestAlgorithm::Sha256, 0), true);
    let (mut c, id) = establish(secured(DigestAlgorithm::Sha256, 0), &mut l);
    let out = c.send_message(b"payload", true).unwrap();
    let mut bad = out[0].clone();
    bad.bytes[17] ^= 0x01;
    let h = l.handle_datagram(1, &bad);
    assert!(matches!(h.disposition, Disposition::DroppedAuth(_)));
    assert!(h.out.is_empty());
    assert_eq!(l.connection(id).unwrap().stats().dropped_auth, 1);
    assert_eq!(l.handle_datagram(2, &out[0]).disposition, Disposition::Accepted);
}

#[test]
fn lossy_transfer_survives_wraparound() {
    let start = crate::seq::MAX_SEQ - 100;
    let mut l = listener(plain(0), false);
    let (mut c, id) = establish(plain(start), &mut l);
    let payload: Vec<u8> = (0..300 * MAX_PAYLOAD).map(|i| (i * 7 % 251) as u8).collect();
    for chunk in payload.chunks(MAX_PAYLOAD * 4) {
        c.send_message(chunk, true).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    run(
        &mut c,
        &mut l,
        0,
        60_000_000,
        |_| rand::Rng::random_bool(&mut rng, 0.1),
        |c, _| c.all_acknowledged(),
    );
    assert!(c.all_acknowledged());
    let r = l.connection_mut(id).unwrap();
    r.check_invariants().unwrap();
    let got: Vec<u8> = std::iter::from_fn(|| r.recv_message()).flatten().collect();
    assert_eq!(got, payload);
    assert!(c.stats().retransmitted > 0);
    assert!(c.snd_next().value() < 1000);
}

#[test]
fn unordered_message_delivered_ahead_of_gap() {
    let mut l = listener(plain(0), false);
    let (_c, id) = establish(plain(10), &mut l);
    let mut d = data_from(A, B, id, 11, Boundary::Solo, b"late-ok");
    if let Packet::Data { mut header, payload } = decode_plain(&d) {
        header.in_order = false;
        d.bytes = encode_packet(&Packet::Data { header, payload }).unwrap();
    }
    l.handle_datagram(1, &d);
    let r = l.connection_mut(id).unwrap();
    assert_eq!(r.recv_message().as_deref(), Some(&b"late-ok"[..]));
    l.handle_datagram(2, &data_from(A, B, id, 10, Boundary::Solo, b"first"));
    let r = l.connection_mut(id).unwrap();
    assert_eq!(r.recv_message().as_deref(), Some(&b"first"[..]));
    assert_eq!(r.rcv_expected(), seq(12));
    assert_eq!(r.stats().reassembly_errors, 0);
}

#[test]
fn stray_middle_packet_is_discarded() {
    let mut l = listener(plain(0), false);
    let (_c, id) = establish(plain(10), &mut l);
    l.handle_datagram(1, &data_from(A, B, id, 10, Boundary::Middle, b"junk"));
    l.handle_datagram(2, &data_from(A, B, id, 11, Boundary::Solo, b"good"));
    let r = l.connection_mut(id).unwrap();
    assert_eq!(r.stats().reassembly_errors, 1);
    assert_eq!(r.recv_message().as_deref(), Some(&b"good"[..]));
}
