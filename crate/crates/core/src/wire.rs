//! Ethernet / IPv4 / TCP framing and Internet checksums.

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::packet::{PacketRecord, TcpFlags, Timestamp};

pub const ETHERNET_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;

const CLIENT_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
const SERVER_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];

/// Why a frame did not yield a packet record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    NotIp,
    Ipv6,
    NotTcp,
    Fragment,
    /// Captured bytes end before the IP total length.
    SnapTruncated,
    Malformed,
}

fn sum_words(data: &[u8], mut acc: u32) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        acc += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        acc += u32::from(*last) << 8;
    }
    acc
}

fn fold(mut acc: u32) -> u16 {
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    !(acc as u16)
}

fn ip_header_bytes(p: &PacketRecord, checksum: u16) -> Vec<u8> {
    let mut h = Vec::with_capacity(usize::from(p.ip_header_length));
    let ihl = (p.ip_header_length / 4) & 0x0f;
    h.push(0x40 | ihl);
    h.push(p.ip_tos);
    h.extend_from_slice(&p.ip_total_length.to_be_bytes());
    h.extend_from_slice(&p.ip_id.to_be_bytes());
    h.extend_from_slice(&p.ip_frag.to_be_bytes());
    h.push(p.ip_ttl);
    h.push(IPPROTO_TCP);
    h.extend_from_slice(&checksum.to_be_bytes());
    h.extend_from_slice(&p.src.ip().octets());
    h.extend_from_slice(&p.dst.ip().octets());
    h.extend_from_slice(&p.ip_options);
    h
}

fn tcp_header_bytes(p: &PacketRecord, checksum: u16) -> Vec<u8> {
    let mut h = Vec::with_capacity(usize::from(p.tcp_data_offset) * 4);
    h.extend_from_slice(&p.src.port().to_be_bytes());
    h.extend_from_slice(&p.dst.port().to_be_bytes());
    h.extend_from_slice(&p.tcp_seq.to_be_bytes());
    h.extend_from_slice(&p.tcp_ack.to_be_bytes());
    h.push(p.tcp_data_offset << 4);
    h.push(p.tcp_flags.0);
    h.extend_from_slice(&p.tcp_window.to_be_bytes());
    h.extend_from_slice(&checksum.to_be_bytes());
    h.extend_from_slice(&p.tcp_urgent.to_be_bytes());
    h.extend_from_slice(&p.tcp_options);
    h
}

pub fn ipv4_checksum(p: &PacketRecord) -> u16 {
    fold(sum_words(&ip_header_bytes(p, 0), 0))
}

pub fn tcp_checksum(p: &PacketRecord) -> u16 {
    let seg = tcp_header_bytes(p, 0);
    let tcp_len = (seg.len() + p.payload.len()) as u32;
    let mut acc = sum_words(&p.src.ip().octets(), 0);
    acc = sum_words(&p.dst.ip().octets(), acc);
    acc += u32::from(IPPROTO_TCP) + tcp_len;
    acc = sum_words(&seg, acc);
    // header length is always even, so the payload starts word-aligned
    fold(sum_words(&p.payload, acc))
}

/// Serializes a record as an Ethernet frame, writing its checksum fields
/// verbatim.
pub fn encode_frame(p: &PacketRecord) -> Vec<u8> {
    let mut f = Vec::with_capacity(ETHERNET_HEADER_LEN + 40 + p.payload.len());
    let (dst_mac, src_mac) = if p.src.port() == 80 { (CLIENT_MAC, SERVER_MAC) } else { (SERVER_MAC, CLIENT_MAC) };
    f.extend_from_slice(&dst_mac);
    f.extend_from_slice(&src_mac);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    f.extend_from_slice(&ip_header_bytes(p, p.ip_checksum));
    f.extend_from_slice(&tcp_header_bytes(p, p.tcp_checksum));
    f.extend_from_slice(&p.payload);
    f
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an Ethernet frame (with at most one 802.1Q tag) into a record.
///
/// A checksum field of zero is treated as stripped rather than wrong, so
/// anonymized evidence re-reads cleanly.
pub fn decode_frame(index: u64, ts: Timestamp, frame: &[u8]) -> Result<PacketRecord, Skip> {
    if frame.len() < ETHERNET_HEADER_LEN {
        return Err(Skip::Malformed);
    }
    let mut off = 12;
    let mut ethertype = be16(frame, off);
    off += 2;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < off + 4 {
            return Err(Skip::Malformed);
        }
        ethertype = be16(frame, off + 2);
        off += 4;
    }
    match ethertype {
        ETHERTYPE_IPV4 => {}
        ETHERTYPE_IPV6 => return Err(Skip::Ipv6),
        _ => return Err(Skip::NotIp),
    }
    let ip = &frame[off..];
    if ip.len() < 20 {
        return Err(Skip::Malformed);
    }
    if ip[0] >> 4 != 4 {
        return Err(Skip::Malformed);
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total = usize::from(be16(ip, 2));
    if ihl < 20 || total < ihl {
        return Err(Skip::Malformed);
    }
    let frag = be16(ip, 6);
    if frag & 0x2000 != 0 || frag & 0x1fff != 0 {
        return Err(Skip::Fragment);
    }
    if ip[9] != IPPROTO_TCP {
        return Err(Skip::NotTcp);
    }
    if ip.len() < total {
        return Err(Skip::SnapTruncated);
    }
    let tcp = &ip[ihl..total];
    if tcp.len() < 20 {
        return Err(Skip::Malformed);
    }
    let data_offset = tcp[12] >> 4;
    let thl = usize::from(data_offset) * 4;
    if data_offset < 5 || thl > tcp.len() {
        return Err(Skip::Malformed);
    }
    let src = SocketAddrV4::new(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]), be16(tcp, 0));
    let dst = SocketAddrV4::new(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]), be16(tcp, 2));
    let mut p = PacketRecord {
        index,
        ts,
        src,
        dst,
        ip_tos: ip[1],
        ip_id: be16(ip, 4),
        ip_frag: frag,
        ip_ttl: ip[8],
        ip_total_length: total as u16,
        ip_header_length: ihl as u8,
        ip_checksum: be16(ip, 10),
        ip_checksum_ok: true,
        ip_options: ip[20..ihl].to_vec(),
        tcp_seq: be32(tcp, 4),
        tcp_ack: be32(tcp, 8),
        tcp_flags: TcpFlags(tcp[13]),
        tcp_data_offset: data_offset,
        tcp_window: be16(tcp, 14),
        tcp_urgent: be16(tcp, 18),
        tcp_checksum: be16(tcp, 16),
        tcp_checksum_ok: true,
        tcp_options: tcp[20..thl].to_vec(),
        payload: tcp[thl..].to_vec(),
    };
    p.ip_checksum_ok = p.ip_checksum == 0 || p.ip_checksum == ipv4_checksum(&p);
    p.tcp_checksum_ok = p.tcp_checksum == 0 || p.tcp_checksum == tcp_checksum(&p);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::endpoint;
    use proptest::prelude::*;

    #[test]
    fn known_ipv4_checksum() {
        // classic textbook header: 4500 0073 0000 4000 4011 b861 c0a8 0001 c0a8 00c7
        let hdr = [
            0x45u8, 0x00, 0x00, 0x73, 0x00, 0x00, 0x40, 0x00, 0x40, 0x11, 0x00, 0x00, 0xc0, 0xa8, 0x00, 0x01, 0xc0,
            0xa8, 0x00, 0xc7,
        ];
        assert_eq!(fold(sum_words(&hdr, 0)), 0xb861);
    }

    #[test]
    fn checksum_verifies_to_zero() {
        let p = PacketRecord::tcp(
            Timestamp(5),
            endpoint([10, 0, 0, 1], 4001),
            endpoint([1, 2, 3, 4], 80),
            77,
            88,
            TcpFlags::ACK | TcpFlags::PSH,
            b"GET / HTTP/1.1\r\n\r\n".to_vec(),
        );
        let frame = encode_frame(&p);
        let ip = &frame[ETHERNET_HEADER_LEN..ETHERNET_HEADER_LEN + 20];
        assert_eq!(fold(sum_words(ip, 0)), 0);
    }

    #[test]
    fn vlan_and_skips() {
        let p = PacketRecord::tcp(
            Timestamp(0),
            endpoint([1, 2, 3, 4], 80),
            endpoint([5, 6, 7, 8], 999),
            1,
            2,
            TcpFlags::ACK,
            b"hi".to_vec(),
        );
        let plain = encode_frame(&p);
        let mut tagged = plain[..12].to_vec();
        tagged.extend_from_slice(&[0x81, 0x00, 0x00, 0x2a]);
        tagged.extend_from_slice(&plain[12..]);
        assert_eq!(decode_frame(0, p.ts, &tagged).unwrap(), p);

        let mut v6 = plain.clone();
        v6[12..14].copy_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
        assert_eq!(decode_frame(0, p.ts, &v6), Err(Skip::Ipv6));

        let mut udp = plain.clone();
        udp[ETHERNET_HEADER_LEN + 9] = 17;
        assert_eq!(decode_frame(0, p.ts, &udp), Err(Skip::NotTcp));

        let mut frag = plain.clone();
        frag[ETHERNET_HEADER_LEN + 6] = 0x20;
        assert_eq!(decode_frame(0, p.ts, &frag), Err(Skip::Fragment));

        assert_eq!(decode_frame(0, p.ts, &plain[..plain.len() - 1]), Err(Skip::SnapTruncated));
    }

    #[test]
    fn bad_checksum_is_detected() {
        let p = PacketRecord::tcp(
            Timestamp(0),
            endpoint([1, 2, 3, 4], 80),
            endpoint([5, 6, 7, 8], 999),
            1,
            2,
            TcpFlags::ACK,
            b"hi".to_vec(),
        )
        .with_bad_tcp_checksum();
        let back = decode_frame(0, p.ts, &encode_frame(&p)).unwrap();
        assert!(!back.tcp_checksum_ok);
        assert!(back.ip_checksum_ok);
    }

    proptest! {
        #[test]
        fn frame_round_trip(
            src in any::<[u8; 4]>(), dst in any::<[u8; 4]>(), sp in any::<u16>(), dp in any::<u16>(),
            seq in any::<u32>(), ack in any::<u32>(), flags in 0u8..0x40, id in any::<u16>(), ttl in any::<u8>(),
            opts in prop::collection::vec(any::<u8>(), 0..3usize).prop_map(|v| v.into_iter().flat_map(|b| [b; 4]).collect::<Vec<u8>>()),
            payload in prop::collection::vec(any::<u8>(), 0..200),
        ) {
            let mut p = PacketRecord::tcp(Timestamp(1), endpoint(src, sp), endpoint(dst, dp), seq, ack, TcpFlags(flags), payload)
                .with_ip_id(id)
                .with_ttl(ttl);
            p.tcp_data_offset = 5 + (opts.len() / 4) as u8;
            p.ip_total_length += opts.len() as u16;
            p.tcp_options = opts;
            p.refresh_checksums();
            let back = decode_frame(0, p.ts, &encode_frame(&p)).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
