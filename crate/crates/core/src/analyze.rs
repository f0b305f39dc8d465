//! From raw races to injection findings.
//!
//! Each race is screened against benign retransmission patterns, the forged
//! packet is picked by its IP-ID and TTL distance from the rest of the
//! server's packets, ID-mimicry is flagged, arrival deltas are tallied, and
//! injections are grouped by the content they carry.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{parse_response, Response};
use crate::packet::{seq_distance, Direction, FlowKey, PacketRecord, SeqRange, TcpFlags, Timestamp};
use crate::race::RaceEvent;

pub const SCHEMA_VERSION: u32 = 1;
pub const DELTA_CONVENTION: &str =
    "delta_ms = legitimate arrival - forged arrival; positive means the forged packet arrived first";
pub const HISTOGRAM_BIN_MS: i64 = 10;
pub const HISTOGRAM_SPAN_MS: i64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenignRaceTag {
    LoadBalancerCookie,
    AcceptRangesFlip,
    NonstandardXHeader,
    SeqOffsetRetransmit,
    NoncompliantTcp,
    None,
}

impl BenignRaceTag {
    pub fn is_benign(self) -> bool {
        self != BenignRaceTag::None
    }
}

fn bodies_compatible(a: &[u8], b: &[u8]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

fn header_map<'r, 'a>(r: &'r Response<'a>) -> BTreeMap<&'r str, Vec<&'a [u8]>> {
    let mut m: BTreeMap<&str, Vec<&[u8]>> = BTreeMap::new();
    for h in &r.headers {
        m.entry(h.name.as_str()).or_default().push(h.value);
    }
    m
}

/// Tag for two responses that are the same message except for a header
/// known to change between retransmissions.
fn http_retransmission_tag(a: &Response<'_>, b: &Response<'_>) -> Option<BenignRaceTag> {
    if a.status != b.status || a.version != b.version || a.reason != b.reason {
        return None;
    }
    if !a.head_complete || !b.head_complete || !bodies_compatible(a.body, b.body) {
        return None;
    }
    let (ha, hb) = (header_map(a), header_map(b));
    let names: BTreeSet<&str> = ha.keys().chain(hb.keys()).copied().collect();
    let differing: Vec<&str> = names.into_iter().filter(|n| ha.get(n) != hb.get(n)).collect();
    if differing.is_empty() {
        return None;
    }
    if differing.iter().all(|n| *n == "set-cookie") {
        Some(BenignRaceTag::LoadBalancerCookie)
    } else if differing.iter().all(|n| *n == "accept-ranges") {
        Some(BenignRaceTag::AcceptRangesFlip)
    } else if differing.iter().all(|n| n.starts_with("x-")) {
        Some(BenignRaceTag::NonstandardXHeader)
    } else {
        None
    }
}

fn is_seq_offset_retransmit(ev: &RaceEvent) -> bool {
    seq_distance(ev.first.tcp_seq, ev.second.tcp_seq).abs() == 1
        && bodies_compatible(&ev.first.payload, &ev.second.payload)
}

/// No handshake seen and the peer's acknowledgments never line up with the
/// end of any segment it was sent.
fn is_noncompliant(ev: &RaceEvent) -> bool {
    if ev.context.iter().any(|p| p.tcp_flags.contains(TcpFlags::SYN)) {
        return false;
    }
    let sender = ev.first.src;
    let ends: BTreeSet<u32> = ev.context.iter().filter(|p| p.src == sender).map(PacketRecord::top_seq).collect();
    !ev.other_side_context().any(|p| p.tcp_flags.contains(TcpFlags::ACK) && ends.contains(&p.tcp_ack))
}

/// Classifies a race that is explained by known benign behaviour.
pub fn filter_benign(ev: &RaceEvent) -> BenignRaceTag {
    if let (Some(a), Some(b)) = (parse_response(&ev.first.payload), parse_response(&ev.second.payload)) {
        if let Some(tag) = http_retransmission_tag(&a, &b) {
            return tag;
        }
    }
    if is_seq_offset_retransmit(ev) {
        return BenignRaceTag::SeqOffsetRetransmit;
    }
    if is_noncompliant(ev) {
        return BenignRaceTag::NoncompliantTcp;
    }
    BenignRaceTag::None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    First,
    Second,
    Undetermined,
}

impl Pick {
    pub fn other(self) -> Pick {
        match self {
            Pick::First => Pick::Second,
            Pick::Second => Pick::First,
            Pick::Undetermined => Pick::Undetermined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeryVerdict {
    pub forged: Pick,
    pub by_id_rule: Pick,
    pub by_ttl_rule: Pick,
    pub rules_agree: bool,
    /// Same-side packets the averages were taken over.
    pub context_size: usize,
    /// Context IP-IDs span more than half the ID space, so the raw mean may
    /// straddle a counter wrap.
    pub low_confidence: bool,
    pub confidence_notes: Vec<String>,
}

/// The candidate farther from `mean`; ties are undetermined.
fn farther_from(mean: f64, first: f64, second: f64) -> Pick {
    let (d1, d2) = ((first - mean).abs(), (second - mean).abs());
    if d1 > d2 {
        Pick::First
    } else if d2 > d1 {
        Pick::Second
    } else {
        Pick::Undetermined
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Picks the forged packet of a race from IP-ID and TTL outliers.
pub fn classify_forged(ev: &RaceEvent) -> ForgeryVerdict {
    let context: Vec<&PacketRecord> = ev.same_side_context().collect();
    if context.is_empty() {
        return ForgeryVerdict {
            forged: Pick::Undetermined,
            by_id_rule: Pick::Undetermined,
            by_ttl_rule: Pick::Undetermined,
            rules_agree: false,
            context_size: 0,
            low_confidence: true,
            confidence_notes: vec!["no same-side context packets".into()],
        };
    }
    let ids: Vec<f64> = context.iter().map(|p| f64::from(p.ip_id)).collect();
    let ttls: Vec<f64> = context.iter().map(|p| f64::from(p.ip_ttl)).collect();
    let by_id_rule = farther_from(mean(&ids), f64::from(ev.first.ip_id), f64::from(ev.second.ip_id));
    let by_ttl_rule = farther_from(mean(&ttls), f64::from(ev.first.ip_ttl), f64::from(ev.second.ip_ttl));

    let mut notes = Vec::new();
    let (lo, hi) = context.iter().fold((u16::MAX, u16::MIN), |(lo, hi), p| (lo.min(p.ip_id), hi.max(p.ip_id)));
    let low_confidence = hi - lo > 0x8000;
    if low_confidence {
        notes.push("context ip ids may straddle a counter wrap".into());
    }
    let forged = if by_id_rule != Pick::Undetermined {
        by_id_rule
    } else {
        if by_ttl_rule != Pick::Undetermined {
            notes.push("id rule tied; ttl rule used".into());
        }
        by_ttl_rule
    };
    let rules_agree = by_id_rule != Pick::Undetermined && by_id_rule == by_ttl_rule;
    if !rules_agree && by_id_rule != Pick::Undetermined && by_ttl_rule != Pick::Undetermined {
        notes.push("id and ttl rules disagree; id rule preferred".into());
    }
    ForgeryVerdict {
        forged,
        by_id_rule,
        by_ttl_rule,
        rules_agree,
        context_size: context.len(),
        low_confidence,
        confidence_notes: notes,
    }
}

pub fn picked(ev: &RaceEvent, pick: Pick) -> Option<&PacketRecord> {
    match pick {
        Pick::First => Some(&ev.first),
        Pick::Second => Some(&ev.second),
        Pick::Undetermined => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicryFlag {
    DupServerId,
    DupClientId,
    ByteswapClientId,
}

pub type MimicryFlags = BTreeSet<MimicryFlag>;

/// ID-copying patterns for `candidate`, assumed to be the forged packet.
pub fn detect_mimicry(ev: &RaceEvent, candidate: Pick) -> MimicryFlags {
    let mut flags = MimicryFlags::new();
    let Some(forged) = picked(ev, candidate) else {
        return flags;
    };
    let id = forged.ip_id;
    if ev.same_side_context().any(|p| p.ip_id == id) {
        flags.insert(MimicryFlag::DupServerId);
    }
    for p in ev.other_side_context() {
        if p.ip_id == id {
            flags.insert(MimicryFlag::DupClientId);
        }
        let swapped = p.ip_id.swap_bytes();
        if swapped != p.ip_id && swapped == id {
            flags.insert(MimicryFlag::ByteswapClientId);
        }
    }
    flags
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMimicry {
    pub first: MimicryFlags,
    pub second: MimicryFlags,
}

impl CandidateMimicry {
    pub fn of(ev: &RaceEvent) -> Self {
        CandidateMimicry { first: detect_mimicry(ev, Pick::First), second: detect_mimicry(ev, Pick::Second) }
    }

    pub fn for_pick(&self, pick: Pick) -> Option<&MimicryFlags> {
        match pick {
            Pick::First => Some(&self.first),
            Pick::Second => Some(&self.second),
            Pick::Undetermined => None,
        }
    }

    pub fn any(&self) -> bool {
        !self.first.is_empty() || !self.second.is_empty()
    }
}

/// Legitimate minus forged arrival, in microseconds.
pub fn arrival_delta_us(ev: &RaceEvent, verdict: &ForgeryVerdict) -> Option<i64> {
    let forged = picked(ev, verdict.forged)?;
    let legit = picked(ev, verdict.forged.other())?;
    Some(legit.ts - forged.ts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_ms: i64,
    pub hi_ms: i64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub convention: String,
    pub deltas_ms: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    /// `None` for an empty input.
    pub forged_win_fraction: Option<f64>,
    pub skipped_undetermined: usize,
}

impl TimingStats {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# schema_version={SCHEMA_VERSION}; {DELTA_CONVENTION}")?;
        writeln!(out, "bin_lo_ms,bin_hi_ms,count")?;
        for b in &self.histogram {
            writeln!(out, "{},{},{}", b.lo_ms, b.hi_ms, b.count)?;
        }
        Ok(())
    }
}

fn histogram_bin(delta_ms: f64) -> usize {
    let bins = (2 * HISTOGRAM_SPAN_MS / HISTOGRAM_BIN_MS) as usize;
    let idx = ((delta_ms + HISTOGRAM_SPAN_MS as f64) / HISTOGRAM_BIN_MS as f64).floor();
    (idx.max(0.0) as usize).min(bins - 1)
}

/// Arrival-difference statistics over events with a determined verdict.
///
/// Deltas beyond the histogram span land in the outermost bins. A zero
/// delta counts as the legitimate packet arriving first.
pub fn timing_stats<'a>(items: impl IntoIterator<Item = (&'a RaceEvent, &'a ForgeryVerdict)>) -> TimingStats {
    let bins = (2 * HISTOGRAM_SPAN_MS / HISTOGRAM_BIN_MS) as usize;
    let mut histogram: Vec<HistogramBin> = (0..bins as i64)
        .map(|i| {
            let lo_ms = -HISTOGRAM_SPAN_MS + i * HISTOGRAM_BIN_MS;
            HistogramBin { lo_ms, hi_ms: lo_ms + HISTOGRAM_BIN_MS, count: 0 }
        })
        .collect();
    let mut deltas_ms = Vec::new();
    let mut skipped_undetermined = 0;
    let mut forged_won = 0usize;
    for (ev, verdict) in items {
        let Some(us) = arrival_delta_us(ev, verdict) else {
            skipped_undetermined += 1;
            continue;
        };
        let ms = us as f64 / 1000.0;
        if us > 0 {
            forged_won += 1;
        }
        histogram[histogram_bin(ms)].count += 1;
        deltas_ms.push(ms);
    }
    let forged_win_fraction = (!deltas_ms.is_empty()).then(|| forged_won as f64 / deltas_ms.len() as f64);
    TimingStats { convention: DELTA_CONVENTION.into(), deltas_ms, histogram, forged_win_fraction, skipped_undetermined }
}

/// Digest of a payload with volatile HTTP fields removed: the Date header is
/// dropped and cookie values are reduced to cookie names.
pub fn payload_fingerprint(payload: &[u8]) -> String {
    let canonical = match parse_response(payload) {
        Some(r) => {
            let mut c = Vec::with_capacity(payload.len());
            c.extend_from_slice(r.version);
            c.extend_from_slice(format!(" {} ", r.status).as_bytes());
            c.extend_from_slice(r.reason);
            c.push(b'\n');
            for h in &r.headers {
                match h.name.as_str() {
                    "date" => continue,
                    "set-cookie" | "cookie" => {
                        c.extend_from_slice(h.name.as_bytes());
                        c.push(b':');
                        for pair in h.value.split(|&b| b == b';') {
                            let name = pair.split(|&b| b == b'=').next().unwrap_or_default();
                            c.extend_from_slice(name.trim_ascii());
                            c.push(b';');
                        }
                    }
                    _ => {
                        c.extend_from_slice(h.name.as_bytes());
                        c.push(b':');
                        c.extend_from_slice(h.value);
                    }
                }
                c.push(b'\n');
            }
            c.push(b'\n');
            c.extend_from_slice(r.body);
            c
        }
        None => payload.to_vec(),
    };
    hex::encode(&Sha256::digest(&canonical)[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRef {
    pub flow: FlowKey,
    pub first_index: u64,
    pub second_index: u64,
}

impl EventRef {
    pub fn of(ev: &RaceEvent) -> Self {
        EventRef { flow: ev.flow, first_index: ev.first.index, second_index: ev.second.index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionGroup {
    pub group_id: usize,
    pub payload_fingerprint: String,
    pub events: Vec<EventRef>,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
}

/// Partitions events by the fingerprint of their forged payload. Group ids
/// follow first appearance.
pub fn group_events<'a>(events: impl IntoIterator<Item = (EventRef, Timestamp, &'a [u8])>) -> Vec<InjectionGroup> {
    let mut by_fp: BTreeMap<String, InjectionGroup> = BTreeMap::new();
    for (r, ts, payload) in events {
        let fp = payload_fingerprint(payload);
        let g = by_fp.entry(fp.clone()).or_insert_with(|| InjectionGroup {
            group_id: 0,
            payload_fingerprint: fp,
            events: Vec::new(),
            first_seen: ts,
            last_seen: ts,
        });
        g.events.push(r);
        g.first_seen = g.first_seen.min(ts);
        g.last_seen = g.last_seen.max(ts);
    }
    let mut groups: Vec<InjectionGroup> = by_fp.into_values().collect();
    groups.sort_by(|a, b| (a.first_seen, &a.payload_fingerprint).cmp(&(b.first_seen, &b.payload_fingerprint)));
    for (i, g) in groups.iter_mut().enumerate() {
        g.group_id = i;
        g.events.sort();
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSummary {
    pub index: u64,
    pub ts: Timestamp,
    pub src: std::net::SocketAddrV4,
    pub dst: std::net::SocketAddrV4,
    pub ip_id: u16,
    pub ip_ttl: u8,
    pub seq: u32,
    pub payload_len: usize,
}

impl From<&PacketRecord> for PacketSummary {
    fn from(p: &PacketRecord) -> Self {
        PacketSummary {
            index: p.index,
            ts: p.ts,
            src: p.src,
            dst: p.dst,
            ip_id: p.ip_id,
            ip_ttl: p.ip_ttl,
            seq: p.tcp_seq,
            payload_len: p.payload.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub flow: FlowKey,
    /// Capture time of the later raced packet, in microseconds.
    pub ts: Timestamp,
    pub direction: Direction,
    pub overlap: SeqRange,
    pub first: PacketSummary,
    pub second: PacketSummary,
    pub verdicts: ForgeryVerdict,
    pub benign_tag: BenignRaceTag,
    pub mimicry_flags: CandidateMimicry,
    pub delta_ms: Option<f64>,
    pub group_id: Option<usize>,
    /// Not explained by any benign pattern.
    pub injection: bool,
    pub evidence: Option<String>,
}

impl Finding {
    pub fn forged(&self) -> Option<&PacketSummary> {
        match self.verdicts.forged {
            Pick::First => Some(&self.first),
            Pick::Second => Some(&self.second),
            Pick::Undetermined => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingsReport {
    pub schema_version: u32,
    pub detector_version: String,
    pub delta_convention: String,
    pub findings: Vec<Finding>,
    pub groups: Vec<InjectionGroup>,
    pub timing: TimingStats,
}

impl FindingsReport {
    pub fn injections(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.injection)
    }
}

/// Runs every analysis step over a batch of races. Fills in each event's
/// `time_delta_us` when its forged packet is identified.
pub fn analyze(events: &mut [RaceEvent]) -> FindingsReport {
    let mut findings = Vec::with_capacity(events.len());
    let mut verdicts = Vec::with_capacity(events.len());
    for ev in events.iter_mut() {
        let verdict = classify_forged(ev);
        ev.time_delta_us = arrival_delta_us(ev, &verdict);
        let benign_tag = filter_benign(ev);
        let mimicry_flags = CandidateMimicry::of(ev);
        findings.push(Finding {
            flow: ev.flow,
            ts: ev.second.ts,
            direction: ev.direction,
            overlap: ev.overlap,
            first: (&ev.first).into(),
            second: (&ev.second).into(),
            verdicts: verdict.clone(),
            benign_tag,
            mimicry_flags,
            delta_ms: ev.time_delta_us.map(|us| us as f64 / 1000.0),
            group_id: None,
            injection: !benign_tag.is_benign(),
            evidence: None,
        });
        verdicts.push(verdict);
    }
    let injected: Vec<usize> = (0..events.len()).filter(|&i| findings[i].injection).collect();
    let groups = group_events(injected.iter().filter_map(|&i| {
        picked(&events[i], verdicts[i].forged)
            .map(|p| (EventRef::of(&events[i]), events[i].second.ts, p.payload.as_slice()))
    }));
    for g in &groups {
        for r in &g.events {
            if let Some(f) = findings
                .iter_mut()
                .find(|f| EventRef { flow: f.flow, first_index: f.first.index, second_index: f.second.index } == *r)
            {
                f.group_id = Some(g.group_id);
            }
        }
    }
    let timing = timing_stats(injected.iter().map(|&i| (&events[i], &verdicts[i])));
    findings.sort_by_key(|a| (a.flow, a.ts, a.second.index, a.first.index));
    FindingsReport {
        schema_version: SCHEMA_VERSION,
        detector_version: crate::capture::DETECTOR_VERSION.into(),
        delta_convention: DELTA_CONVENTION.into(),
        findings,
        groups,
        timing,
    }
}
