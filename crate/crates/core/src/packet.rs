//! In-memory packet, flow and session model shared by every stage.
//!
//! Sequence numbers are compared with serial-number arithmetic so that
//! ranges straddling 2^32 behave like any other range.

use std::collections::VecDeque;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::ops::{BitOr, Sub};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::PacketError;
use crate::wire;

/// Port that marks the server side of a session.
pub const HTTP_PORT: u16 = 80;

/// Capture time in microseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_parts(secs: u32, micros: u32) -> Self {
        Timestamp(i64::from(secs) * 1_000_000 + i64::from(micros))
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn secs_part(self) -> u32 {
        self.0.div_euclid(1_000_000) as u32
    }

    pub fn micros_part(self) -> u32 {
        self.0.rem_euclid(1_000_000) as u32
    }

    pub fn offset(self, d: Duration) -> Self {
        Timestamp(self.0 + d.as_micros() as i64)
    }

    pub fn offset_micros(self, us: i64) -> Self {
        Timestamp(self.0 + us)
    }

    /// Absolute distance between two timestamps.
    pub fn abs_diff(self, other: Timestamp) -> Duration {
        Duration::from_micros(self.0.abs_diff(other.0))
    }
}

impl Sub for Timestamp {
    /// Signed difference in microseconds.
    type Output = i64;
    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0.div_euclid(1_000_000), self.0.rem_euclid(1_000_000))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }
}

impl BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [(Self::SYN, 'S'), (Self::FIN, 'F'), (Self::RST, 'R'), (Self::PSH, 'P'), (Self::ACK, '.')];
        for (flag, c) in names {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// `a` precedes `b` in sequence space.
pub fn seq_lt(a: u32, b: u32) -> bool {
    (b.wrapping_sub(a) as i32) > 0
}

/// Signed distance from `from` to `to` in sequence space.
pub fn seq_distance(from: u32, to: u32) -> i64 {
    i64::from(to.wrapping_sub(from) as i32)
}

/// A half-open sequence range `[bottom, top)`, modulo 2^32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqRange {
    pub bottom: u32,
    pub top: u32,
}

impl SeqRange {
    pub fn len(&self) -> u32 {
        self.top.wrapping_sub(self.bottom)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadBounds {
    pub seq_lo: u32,
    pub seq_hi: u32,
    pub payload_len: u32,
}

/// One captured IPv4/TCP packet.
///
/// Header fields are kept verbatim so a record can be written back to a
/// capture unchanged. `index` is the position of the frame in its source
/// capture and identifies the packet in labels and reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub index: u64,
    pub ts: Timestamp,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub ip_tos: u8,
    pub ip_id: u16,
    /// Flags and fragment offset word.
    pub ip_frag: u16,
    pub ip_ttl: u8,
    pub ip_total_length: u16,
    /// Bytes, including options.
    pub ip_header_length: u8,
    pub ip_checksum: u16,
    pub ip_checksum_ok: bool,
    pub ip_options: Vec<u8>,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub tcp_flags: TcpFlags,
    /// 32-bit words.
    pub tcp_data_offset: u8,
    pub tcp_window: u16,
    pub tcp_urgent: u16,
    pub tcp_checksum: u16,
    pub tcp_checksum_ok: bool,
    pub tcp_options: Vec<u8>,
    pub payload: Vec<u8>,
}

impl PacketRecord {
    /// A well-formed packet with option-free headers and valid checksums.
    pub fn tcp(
        ts: Timestamp,
        src: SocketAddrV4,
        dst: SocketAddrV4,
        seq: u32,
        ack: u32,
        flags: TcpFlags,
        payload: impl Into<Vec<u8>>,
    ) -> Self {
        let payload = payload.into();
        let mut p = PacketRecord {
            index: 0,
            ts,
            src,
            dst,
            ip_tos: 0,
            ip_id: 0,
            ip_frag: 0x4000,
            ip_ttl: 64,
            ip_total_length: (40 + payload.len()) as u16,
            ip_header_length: 20,
            ip_checksum: 0,
            ip_checksum_ok: true,
            ip_options: Vec::new(),
            tcp_seq: seq,
            tcp_ack: ack,
            tcp_flags: flags,
            tcp_data_offset: 5,
            tcp_window: 29200,
            tcp_urgent: 0,
            tcp_checksum: 0,
            tcp_checksum_ok: true,
            tcp_options: Vec::new(),
            payload,
        };
        p.refresh_checksums();
        p
    }

    pub fn with_ttl(mut self, ttl: u8) -> Self {
        self.ip_ttl = ttl;
        self.refresh_checksums();
        self
    }

    pub fn with_ip_id(mut self, id: u16) -> Self {
        self.ip_id = id;
        self.refresh_checksums();
        self
    }

    pub fn with_index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    /// Recomputes both checksum fields from the current header values.
    pub fn refresh_checksums(&mut self) {
        self.ip_checksum = wire::ipv4_checksum(self);
        self.tcp_checksum = wire::tcp_checksum(self);
        self.ip_checksum_ok = true;
        self.tcp_checksum_ok = true;
    }

    /// Corrupts the TCP checksum, as seen on a damaged frame.
    pub fn with_bad_tcp_checksum(mut self) -> Self {
        self.tcp_checksum = !wire::tcp_checksum(&self);
        self.tcp_checksum_ok = false;
        self
    }

    pub fn headers_size(&self) -> u32 {
        u32::from(self.ip_header_length) + u32::from(self.tcp_data_offset) * 4
    }

    pub fn payload_len(&self) -> u32 {
        self.payload.len() as u32
    }

    /// Sequence number one past the last payload byte.
    pub fn top_seq(&self) -> u32 {
        self.tcp_seq.wrapping_add(self.payload_len())
    }

    pub fn is_rst(&self) -> bool {
        self.tcp_flags.contains(TcpFlags::RST)
    }

    pub fn checksums_ok(&self) -> bool {
        self.ip_checksum_ok && self.tcp_checksum_ok
    }

    /// The same packet as seen travelling the other way.
    pub fn reversed(&self) -> Self {
        let mut p = self.clone();
        std::mem::swap(&mut p.src, &mut p.dst);
        p.refresh_checksums();
        p
    }
}

/// Sequence interval occupied by a packet's payload.
pub fn derive_payload_bounds(p: &PacketRecord) -> Result<PayloadBounds, PacketError> {
    if p.ip_header_length < 20 {
        return Err(PacketError::ShortIpHeader(u32::from(p.ip_header_length)));
    }
    if p.tcp_data_offset < 5 {
        return Err(PacketError::ShortTcpHeader(p.tcp_data_offset));
    }
    let headers = p.headers_size();
    let total = u32::from(p.ip_total_length);
    if total < headers {
        return Err(PacketError::HeaderOverrun { total: p.ip_total_length, headers });
    }
    let payload_len = total - headers;
    if payload_len as usize != p.payload.len() {
        return Err(PacketError::PayloadMismatch { expected: payload_len, actual: p.payload.len() });
    }
    Ok(PayloadBounds { seq_lo: p.tcp_seq, seq_hi: p.tcp_seq.wrapping_add(payload_len), payload_len })
}

/// Direction-insensitive identity of a TCP connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub endpoint_a: SocketAddrV4,
    pub endpoint_b: SocketAddrV4,
}

impl FlowKey {
    pub fn new(x: SocketAddrV4, y: SocketAddrV4) -> Self {
        let (endpoint_a, endpoint_b) = if x <= y { (x, y) } else { (y, x) };
        FlowKey { endpoint_a, endpoint_b }
    }

    /// The port-80 endpoint, if exactly one side uses it.
    pub fn server(&self) -> Option<SocketAddrV4> {
        match (self.endpoint_a.port() == HTTP_PORT, self.endpoint_b.port() == HTTP_PORT) {
            (true, false) => Some(self.endpoint_a),
            (false, true) => Some(self.endpoint_b),
            _ => None,
        }
    }

    pub fn client(&self) -> Option<SocketAddrV4> {
        let server = self.server()?;
        Some(if server == self.endpoint_a { self.endpoint_b } else { self.endpoint_a })
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.endpoint_a, self.endpoint_b)
    }
}

impl std::str::FromStr for FlowKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once("<->").ok_or_else(|| format!("not a flow key: {s}"))?;
        let a = a.parse().map_err(|e| format!("{a}: {e}"))?;
        let b = b.parse().map_err(|e| format!("{b}: {e}"))?;
        Ok(FlowKey::new(a, b))
    }
}

impl Serialize for FlowKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FlowKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn flow_key(p: &PacketRecord) -> FlowKey {
    FlowKey::new(p.src, p.dst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
    /// Both or neither endpoint uses port 80.
    Ambiguous,
}

pub fn direction(p: &PacketRecord) -> Direction {
    match (p.src.port() == HTTP_PORT, p.dst.port() == HTTP_PORT) {
        (true, false) => Direction::ServerToClient,
        (false, true) => Direction::ClientToServer,
        _ => Direction::Ambiguous,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DirectionStats {
    ttl_sum: u64,
    ttl_count: u64,
    pub last_id: Option<u16>,
}

impl DirectionStats {
    pub fn average_ttl(&self) -> Option<f64> {
        (self.ttl_count > 0).then(|| self.ttl_sum as f64 / self.ttl_count as f64)
    }

    fn observe(&mut self, p: &PacketRecord) {
        self.ttl_sum += u64::from(p.ip_ttl);
        self.ttl_count += 1;
        self.last_id = Some(p.ip_id);
    }
}

/// Bounded, time-ordered packet history of one flow.
#[derive(Debug, Clone)]
pub struct Session {
    pub key: FlowKey,
    pub packets: VecDeque<PacketRecord>,
    pub last_activity: Timestamp,
    pub server_endpoint: Option<SocketAddrV4>,
    pub server_stats: DirectionStats,
    pub client_stats: DirectionStats,
}

impl Session {
    pub fn new(key: FlowKey, now: Timestamp) -> Self {
        Session {
            key,
            packets: VecDeque::new(),
            last_activity: now,
            server_endpoint: key.server(),
            server_stats: DirectionStats::default(),
            client_stats: DirectionStats::default(),
        }
    }

    pub fn from_packets(key: FlowKey, packets: impl IntoIterator<Item = PacketRecord>) -> Self {
        let mut s = Session::new(key, Timestamp::default());
        for p in packets {
            s.push(p, usize::MAX);
        }
        s
    }

    pub fn is_ambiguous(&self) -> bool {
        self.server_endpoint.is_none()
    }

    /// Inserts `p` keeping timestamps non-decreasing, then drops the oldest
    /// packets beyond `history_bound`.
    pub fn push(&mut self, p: PacketRecord, history_bound: usize) {
        match self.server_endpoint {
            Some(server) if p.src == server => self.server_stats.observe(&p),
            Some(_) => self.client_stats.observe(&p),
            None => {}
        }
        if self.packets.is_empty() || p.ts > self.last_activity {
            self.last_activity = p.ts;
        }
        let pos = self.packets.partition_point(|q| q.ts <= p.ts);
        self.packets.insert(pos, p);
        while self.packets.len() > history_bound {
            self.packets.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }
}

pub fn endpoint(ip: [u8; 4], port: u16) -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::from(ip), port)
}
