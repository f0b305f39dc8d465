//! Packet-race detection.
//!
//! Two packets of one session race when they travel in the same direction,
//! arrive within `max_interval` of each other, occupy overlapping sequence
//! ranges, and carry different bytes somewhere in the overlap.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::packet::{direction, flow_key, seq_distance, Direction, FlowKey, PacketRecord, SeqRange, Session};

pub const DEFAULT_MAX_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub max_interval: Duration,
    /// Also report races between client-to-server packets (and sessions
    /// without a unique port-80 side).
    pub include_client_to_server: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams { max_interval: DEFAULT_MAX_INTERVAL, include_client_to_server: false }
    }
}

impl DetectorParams {
    pub fn with_max_interval(max_interval: Duration) -> Self {
        DetectorParams { max_interval, ..Default::default() }
    }

    fn reports(&self, dir: Direction) -> bool {
        dir == Direction::ServerToClient || self.include_client_to_server
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceEvent {
    pub flow: FlowKey,
    /// Earlier-arriving packet of the pair.
    pub first: PacketRecord,
    pub second: PacketRecord,
    pub overlap: SeqRange,
    pub direction: Direction,
    /// Legitimate minus forged capture time, once the forged packet is known.
    pub time_delta_us: Option<i64>,
    /// Session history at detection time, including both raced packets.
    pub context: Vec<PacketRecord>,
}

/// Identity used to compare event sets: flow, both packet indices, overlap.
pub type EventId = (FlowKey, u64, u64, u32, u32);

impl RaceEvent {
    pub fn id(&self) -> EventId {
        (self.flow, self.first.index, self.second.index, self.overlap.bottom, self.overlap.top)
    }

    pub fn is_raced(&self, p: &PacketRecord) -> bool {
        p.index == self.first.index || p.index == self.second.index
    }

    /// Context packets sent by the same endpoint as the raced pair, minus
    /// the pair itself.
    pub fn same_side_context(&self) -> impl Iterator<Item = &PacketRecord> {
        self.context.iter().filter(move |p| p.src == self.first.src && !self.is_raced(p))
    }

    /// Context packets sent by the other endpoint.
    pub fn other_side_context(&self) -> impl Iterator<Item = &PacketRecord> {
        self.context.iter().filter(move |p| p.src == self.first.dst)
    }
}

/// Whether a packet may take part in a race at all.
pub fn is_race_candidate(p: &PacketRecord) -> bool {
    p.checksums_ok() && !p.is_rst() && !p.payload.is_empty()
}

/// Overlap of two same-direction packets whose bytes differ inside it.
///
/// Offsets are taken relative to `a`'s sequence number with serial
/// arithmetic, so ranges straddling 2^32 compare like any other.
pub fn conflicting_overlap(a: &PacketRecord, b: &PacketRecord) -> Option<SeqRange> {
    let shift = seq_distance(a.tcp_seq, b.tcp_seq);
    let a_len = a.payload.len() as i64;
    let b_len = b.payload.len() as i64;
    let lo = shift.max(0);
    let hi = a_len.min(shift + b_len);
    if lo >= hi {
        return None;
    }
    let a_bytes = &a.payload[lo as usize..hi as usize];
    let b_bytes = &b.payload[(lo - shift) as usize..(hi - shift) as usize];
    if a_bytes == b_bytes {
        return None;
    }
    Some(SeqRange { bottom: a.tcp_seq.wrapping_add(lo as u32), top: a.tcp_seq.wrapping_add(hi as u32) })
}

/// Full race test for a pair, with `first` arrived before `second`.
pub fn race_between(first: &PacketRecord, second: &PacketRecord, max_interval: Duration) -> Option<SeqRange> {
    if first.src != second.src || !is_race_candidate(first) || !is_race_candidate(second) {
        return None;
    }
    if first.ts.abs_diff(second.ts) > max_interval {
        return None;
    }
    conflicting_overlap(first, second)
}

/// Checks `cp` against every stored packet of `session`; `cp` itself is not
/// yet part of the session.
pub fn check_race(cp: &PacketRecord, session: &Session, params: &DetectorParams) -> Vec<RaceEvent> {
    let dir = direction(cp);
    if !params.reports(dir) || !is_race_candidate(cp) {
        return Vec::new();
    }
    let mut events = Vec::new();
    for op in &session.packets {
        if let Some(overlap) = race_between(op, cp, params.max_interval) {
            events.push(RaceEvent {
                flow: session.key,
                first: op.clone(),
                second: cp.clone(),
                overlap,
                direction: dir,
                time_delta_us: None,
                context: Vec::new(),
            });
        }
    }
    if !events.is_empty() {
        let mut context: Vec<PacketRecord> = session.packets.iter().cloned().collect();
        let pos = context.partition_point(|q| q.ts <= cp.ts);
        context.insert(pos, cp.clone());
        for ev in &mut events {
            ev.context = context.clone();
        }
    }
    events
}

/// Exhaustive O(n^2) reference: compares every earlier/later pair of each
/// flow byte by byte through absolute sequence numbers.
///
/// Shares no code with [`check_race`]; events carry no context.
pub fn brute_force_oracle(packets: &[PacketRecord], params: &DetectorParams) -> Vec<RaceEvent> {
    let mut flows: BTreeMap<FlowKey, Vec<&PacketRecord>> = BTreeMap::new();
    for p in packets {
        flows.entry(flow_key(p)).or_default().push(p);
    }
    let window_us = params.max_interval.as_micros() as i64;
    let usable =
        |p: &PacketRecord| p.ip_checksum_ok && p.tcp_checksum_ok && p.tcp_flags.0 & 0x04 == 0 && !p.payload.is_empty();
    let mut events = Vec::new();
    for (flow, list) in flows {
        for j in 0..list.len() {
            let cp = list[j];
            let dir = match (cp.src.port() == 80, cp.dst.port() == 80) {
                (true, false) => Direction::ServerToClient,
                (false, true) => Direction::ClientToServer,
                _ => Direction::Ambiguous,
            };
            if dir != Direction::ServerToClient && !params.include_client_to_server {
                continue;
            }
            for &op in &list[..j] {
                if op.src != cp.src || !usable(op) || !usable(cp) {
                    continue;
                }
                if (cp.ts.0 - op.ts.0).abs() > window_us {
                    continue;
                }
                let earlier: HashMap<u32, u8> =
                    op.payload.iter().enumerate().map(|(i, b)| (op.tcp_seq.wrapping_add(i as u32), *b)).collect();
                let mut common = Vec::new();
                let mut differs = false;
                for (i, b) in cp.payload.iter().enumerate() {
                    let seq = cp.tcp_seq.wrapping_add(i as u32);
                    if let Some(other) = earlier.get(&seq) {
                        common.push(seq);
                        differs |= other != b;
                    }
                }
                if !differs {
                    continue;
                }
                let bottom = *common
                    .iter()
                    .find(|s| !earlier.contains_key(&s.wrapping_sub(1)) || !cp_has(cp, s.wrapping_sub(1)))
                    .unwrap();
                let top = common
                    .iter()
                    .find(|s| !earlier.contains_key(&s.wrapping_add(1)) || !cp_has(cp, s.wrapping_add(1)))
                    .unwrap()
                    .wrapping_add(1);
                events.push(RaceEvent {
                    flow,
                    first: op.clone(),
                    second: cp.clone(),
                    overlap: SeqRange { bottom, top },
                    direction: dir,
                    time_delta_us: None,
                    context: Vec::new(),
                });
            }
        }
    }
    events
}

fn cp_has(p: &PacketRecord, seq: u32) -> bool {
    (seq.wrapping_sub(p.tcp_seq) as u64) < p.payload.len() as u64
}
