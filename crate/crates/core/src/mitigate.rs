//! Client-side mitigation replayed against captures.
//!
//! The naive mode holds every incoming packet for `hold_time` and blocks a
//! held packet when a conflicting one shows up. The improved mode only holds
//! packets whose TTL or IP-ID is out of line with the session so far; all
//! other packets pass at once.
//!
//! Replay runs on a virtual clock: a held packet leaves the queue at its
//! deadline, which is processed just before the first later packet.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, MitigationError};
use crate::packet::{direction, flow_key, Direction, FlowKey, PacketRecord, Timestamp};
use crate::race::race_between;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationMode {
    Naive,
    Improved,
}

impl std::str::FromStr for MitigationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" => Ok(MitigationMode::Naive),
            "improved" => Ok(MitigationMode::Improved),
            other => Err(format!("unknown mitigation mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationParams {
    pub hold_time: Duration,
    /// Largest accepted |ttl - average ttl|.
    pub ttl_slack: f64,
    /// IP-ID window below the last accepted ID.
    pub id_back: u16,
    /// IP-ID window above the last accepted ID.
    pub id_fwd: u16,
}

impl Default for MitigationParams {
    fn default() -> Self {
        MitigationParams { hold_time: Duration::from_millis(200), ttl_slack: 1.0, id_back: 10, id_fwd: 5000 }
    }
}

/// `id` lies in `[last_id - back, last_id + fwd]` modulo 2^16.
pub fn id_in_window(id: u16, last_id: u16, back: u16, fwd: u16) -> bool {
    let lower = last_id.wrapping_sub(back);
    u32::from(id.wrapping_sub(lower)) <= u32::from(back) + u32::from(fwd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    DelayThenAccept,
    Block,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationVerdict {
    pub packet_index: u64,
    pub action: Action,
    pub delay_incurred_us: u64,
    pub reason: String,
}

impl MitigationVerdict {
    fn accept(p: &PacketRecord, reason: &str) -> Self {
        MitigationVerdict { packet_index: p.index, action: Action::Accept, delay_incurred_us: 0, reason: reason.into() }
    }
}

#[derive(Debug, Clone)]
struct Held {
    packet: PacketRecord,
    deadline: Timestamp,
    reason: String,
}

/// Per-session mitigation state.
#[derive(Debug, Clone)]
pub struct MitigationState {
    params: MitigationParams,
    ttl_sum: f64,
    ttl_count: u64,
    last_id: Option<u16>,
    queue: Vec<Held>,
}

impl MitigationState {
    pub fn new(params: MitigationParams) -> Self {
        MitigationState { params, ttl_sum: 0.0, ttl_count: 0, last_id: None, queue: Vec::new() }
    }

    pub fn average_ttl(&self) -> Option<f64> {
        (self.ttl_count > 0).then(|| self.ttl_sum / self.ttl_count as f64)
    }

    pub fn last_id(&self) -> Option<u16> {
        self.last_id
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    fn learn(&mut self, p: &PacketRecord) {
        self.ttl_sum += f64::from(p.ip_ttl);
        self.ttl_count += 1;
        self.last_id = Some(p.ip_id);
    }

    /// Why `p` looks out of line with the session, if it does.
    pub fn suspicion(&self, p: &PacketRecord) -> Option<String> {
        let mut why = Vec::new();
        if let Some(avg) = self.average_ttl() {
            if (f64::from(p.ip_ttl) - avg).abs() > self.params.ttl_slack {
                why.push(format!("ttl {} vs average {avg:.1}", p.ip_ttl));
            }
        }
        if let Some(last) = self.last_id {
            if !id_in_window(p.ip_id, last, self.params.id_back, self.params.id_fwd) {
                why.push(format!("ip id {} outside window of {last}", p.ip_id));
            }
        }
        (!why.is_empty()).then(|| why.join("; "))
    }

    /// Releases held packets whose deadline passed before `now`.
    pub fn release_due(&mut self, now: Timestamp) -> Vec<MitigationVerdict> {
        let hold = self.params.hold_time.as_micros() as u64;
        let (due, keep): (Vec<Held>, Vec<Held>) = self.queue.drain(..).partition(|h| h.deadline < now);
        self.queue = keep;
        due.into_iter()
            .map(|h| MitigationVerdict {
                packet_index: h.packet.index,
                action: Action::DelayThenAccept,
                delay_incurred_us: hold,
                reason: h.reason,
            })
            .collect()
    }

    /// Releases everything still held, at its own deadline.
    pub fn drain(&mut self) -> Vec<MitigationVerdict> {
        self.release_due(Timestamp(i64::MAX))
    }

    /// Blocks every held packet racing `cp`.
    fn block_racing(&mut self, cp: &PacketRecord, out: &mut Vec<MitigationVerdict>) -> bool {
        let hold = self.params.hold_time;
        let before = out.len();
        self.queue.retain(|h| {
            if race_between(&h.packet, cp, hold).is_some() {
                out.push(MitigationVerdict {
                    packet_index: h.packet.index,
                    action: Action::Block,
                    delay_incurred_us: cp.ts.abs_diff(h.packet.ts).as_micros() as u64,
                    reason: format!("raced by packet {}", cp.index),
                });
                false
            } else {
                true
            }
        });
        out.len() > before
    }

    fn hold(&mut self, cp: &PacketRecord, now: Timestamp, reason: String) {
        self.queue.push(Held { packet: cp.clone(), deadline: now.offset(self.params.hold_time), reason });
    }

    /// Delay-only-suspicious handling of one incoming packet.
    pub fn process_improved(&mut self, cp: &PacketRecord, now: Timestamp) -> Vec<MitigationVerdict> {
        let mut out = self.release_due(now);
        if self.block_racing(cp, &mut out) {
            self.learn(cp);
            out.push(MitigationVerdict::accept(cp, "won race against a held suspicious packet"));
            return out;
        }
        if self.ttl_count == 0 {
            self.learn(cp);
            out.push(MitigationVerdict::accept(cp, "first packet of session"));
            return out;
        }
        match self.suspicion(cp) {
            Some(reason) => self.hold(cp, now, reason),
            None => {
                self.learn(cp);
                out.push(MitigationVerdict::accept(cp, "consistent ttl and ip id"));
            }
        }
        out
    }

    /// Hold-everything handling of one incoming packet.
    pub fn process_naive(&mut self, cp: &PacketRecord, now: Timestamp) -> Vec<MitigationVerdict> {
        let mut out = self.release_due(now);
        self.block_racing(cp, &mut out);
        self.hold(cp, now, "held for race window".into());
        out
    }
}

/// Mitigation over all sessions of a capture, fed in timestamp order.
/// Only server-to-client packets are subject to mitigation.
#[derive(Debug)]
pub struct MitigationEngine {
    pub mode: MitigationMode,
    params: MitigationParams,
    sessions: HashMap<FlowKey, MitigationState>,
    pending: BTreeSet<FlowKey>,
}

impl MitigationEngine {
    pub fn new(mode: MitigationMode, params: MitigationParams) -> Self {
        MitigationEngine { mode, params, sessions: HashMap::new(), pending: BTreeSet::new() }
    }

    /// Verdicts settled at `p`'s arrival: releases due anywhere, blocks, and
    /// `p`'s own verdict unless it is held.
    pub fn process(&mut self, p: &PacketRecord) -> Vec<MitigationVerdict> {
        let now = p.ts;
        let mut out = Vec::new();
        let pending: Vec<FlowKey> = self.pending.iter().copied().collect();
        for key in pending {
            let state = self.sessions.get_mut(&key).expect("pending session");
            out.extend(state.release_due(now));
            if state.queued() == 0 {
                self.pending.remove(&key);
            }
        }
        if direction(p) != Direction::ServerToClient {
            return out;
        }
        let key = flow_key(p);
        let state = self.sessions.entry(key).or_insert_with(|| MitigationState::new(self.params));
        out.extend(match self.mode {
            MitigationMode::Naive => state.process_naive(p, now),
            MitigationMode::Improved => state.process_improved(p, now),
        });
        if state.queued() > 0 {
            self.pending.insert(key);
        }
        out
    }

    pub fn finish(&mut self) -> Vec<MitigationVerdict> {
        let mut out = Vec::new();
        for key in std::mem::take(&mut self.pending) {
            out.extend(self.sessions.get_mut(&key).expect("pending session").drain());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Injected,
    Benign,
}

/// Ground-truth sidecar: packet index to label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFile {
    pub schema_version: u32,
    pub labels: BTreeMap<u64, Label>,
}

impl LabelFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub schema_version: u32,
    pub mode: MitigationMode,
    pub injected_total: u64,
    pub fn_count: u64,
    pub fn_rate: f64,
    /// Mean delay over accepted packets.
    pub mean_delay_ms: f64,
    /// Mean over flows of each flow's total added delay.
    pub mean_flow_delay_ms: f64,
    pub accepted: u64,
    pub blocks: u64,
    pub delays: u64,
    pub false_blocks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: EvaluationSummary,
    pub verdicts: Vec<MitigationVerdict>,
}

/// Replays a labeled capture through `mode` and scores it. A false negative
/// is an injected packet that was accepted.
pub fn evaluate(
    packets: &[PacketRecord],
    labels: &LabelFile,
    mode: MitigationMode,
    params: MitigationParams,
) -> Result<Evaluation, MitigationError> {
    if labels.labels.is_empty() {
        return Err(MitigationError::Unlabeled);
    }
    let by_index: HashMap<u64, &PacketRecord> = packets.iter().map(|p| (p.index, p)).collect();
    if let Some(missing) = labels.labels.keys().find(|i| !by_index.contains_key(i)) {
        return Err(MitigationError::UnknownPacket(*missing));
    }
    let mut order: Vec<&PacketRecord> = packets.iter().collect();
    order.sort_by_key(|p| (p.ts, p.index));
    let mut engine = MitigationEngine::new(mode, params);
    let mut verdicts = Vec::new();
    for p in order {
        verdicts.extend(engine.process(p));
    }
    verdicts.extend(engine.finish());
    verdicts.sort_by_key(|v| v.packet_index);

    let is_injected = |i: u64| labels.labels.get(&i) == Some(&Label::Injected);
    let mut s = EvaluationSummary {
        schema_version: crate::analyze::SCHEMA_VERSION,
        mode,
        injected_total: 0,
        fn_count: 0,
        fn_rate: 0.0,
        mean_delay_ms: 0.0,
        mean_flow_delay_ms: 0.0,
        accepted: 0,
        blocks: 0,
        delays: 0,
        false_blocks: 0,
    };
    let mut delay_sum_us = 0u64;
    let mut flow_delay: BTreeMap<FlowKey, u64> = BTreeMap::new();
    for v in &verdicts {
        let injected = is_injected(v.packet_index);
        s.injected_total += u64::from(injected);
        match v.action {
            Action::Block => {
                s.blocks += 1;
                s.false_blocks += u64::from(!injected);
            }
            Action::Accept | Action::DelayThenAccept => {
                s.accepted += 1;
                s.fn_count += u64::from(injected);
                s.delays += u64::from(v.action == Action::DelayThenAccept);
                delay_sum_us += v.delay_incurred_us;
                *flow_delay.entry(flow_key(by_index[&v.packet_index])).or_default() += v.delay_incurred_us;
            }
        }
    }
    if s.injected_total > 0 {
        s.fn_rate = s.fn_count as f64 / s.injected_total as f64;
    }
    if s.accepted > 0 {
        s.mean_delay_ms = delay_sum_us as f64 / s.accepted as f64 / 1000.0;
    }
    if !flow_delay.is_empty() {
        s.mean_flow_delay_ms = flow_delay.values().sum::<u64>() as f64 / flow_delay.len() as f64 / 1000.0;
    }
    Ok(Evaluation { summary: s, verdicts })
}
