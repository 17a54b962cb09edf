use proptest::prelude::*;
use std::net::{Ipv4Addr, SocketAddrV4};
use udt_armor::auth::{open, seal, ConnectionKey, KeyMaterial};
use udt_armor::checksum::{build_pseudo_header, frame_udp, verify_udp_checksum};
use udt_armor::wire::{decode_packet, encode_packet, Boundary, DataPacketHeader};
use udt_armor::{DigestAlgorithm, Packet, Password};

fn data_packet() -> impl Strategy<Value = Packet> {
    (0u32..1 << 31, 0u32..4, any::<bool>(), 0u32..1 << 29, any::<u32>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..1400))
        .prop_map(|(sequence, b, in_order, message_number, timestamp_us, dest_socket_id, payload)| Packet::Data {
            header: DataPacketHeader {
                sequence,
                boundary: Boundary::from_bits(b),
                in_order,
                message_number,
                timestamp_us,
                dest_socket_id,
            },
            payload,
        })
}

fn addr() -> impl Strategy<Value = SocketAddrV4> {
    (any::<u32>(), any::<u16>()).prop_map(|(ip, port)| SocketAddrV4::new(Ipv4Addr::from(ip), port))
}

proptest! {
    #[test]
    fn data_packets_round_trip(p in data_packet()) {
        let bytes = encode_packet(&p).unwrap();
        prop_assert_eq!(decode_packet(&bytes).unwrap(), p);
    }

    #[test]
    fn framed_udp_verifies(src in addr(), dst in addr(), payload in prop::collection::vec(any::<u8>(), 0..600)) {
        let framed = frame_udp(src, dst, &payload).unwrap();
        let pseudo = build_pseudo_header(*src.ip(), *dst.ip(), framed.len()).unwrap();
        prop_assert!(verify_udp_checksum(&pseudo, &framed).unwrap());
    }

    #[test]
    fn sealed_segments_reject_other_flows(
        src in addr(),
        dst in addr(),
        other in addr(),
        alg in prop::sample::select(DigestAlgorithm::ALL.to_vec()),
        ck in any::<[u8; 16]>(),
        pkt in prop::collection::vec(any::<u8>(), 16..300),
    ) {
        prop_assume!(other != src);
        let key = KeyMaterial { password: Password::new("prop key").unwrap(), connection_key: ConnectionKey(ck) };
        let sealed = seal(alg, src, dst, pkt.clone(), &key).unwrap();
        prop_assert_eq!(open(alg, src, dst, &sealed, &key), Ok(&pkt[..]));
        prop_assert!(open(alg, other, dst, &sealed, &key).is_err());
    }
}
