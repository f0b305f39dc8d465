//! Flow-hash dispatch and per-worker session caches.
//!
//! Packets go from the capture reader through a bounded queue to a
//! dispatcher, which hands each one to the worker owning its flow. A worker
//! keeps a fixed-capacity cache of sessions and evicts the one idle the
//! longest when it is full. Sessions have no SYN/FIN lifecycle: a flow seen
//! again after eviction simply starts a fresh session.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddrV4;
use std::path::Path;
use std::thread;
use std::time::Duration;

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::packet::{flow_key, FlowKey, PacketRecord, Session, Timestamp};
use crate::race::{check_race, DetectorParams, RaceEvent};

const BATCH: usize = 256;

fn default_workers() -> usize {
    4
}
fn default_cache_capacity() -> usize {
    1 << 20
}
fn default_queue_bound() -> usize {
    16
}
fn default_history_bound() -> usize {
    64
}
fn default_max_interval_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_cache_capacity")]
    pub cache_capacity: usize,
    /// Batches waiting between pipeline stages.
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    /// Packets retained per session.
    #[serde(default = "default_history_bound")]
    pub history_bound: usize,
    #[serde(default = "default_max_interval_ms")]
    pub max_interval_ms: u64,
    #[serde(default)]
    pub include_client_to_server: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: default_workers(),
            cache_capacity: default_cache_capacity(),
            queue_bound: default_queue_bound(),
            history_bound: default_history_bound(),
            max_interval_ms: default_max_interval_ms(),
            include_client_to_server: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("workers", self.workers as u64),
            ("cache_capacity", self.cache_capacity as u64),
            ("queue_bound", self.queue_bound as u64),
            ("history_bound", self.history_bound as u64),
            ("max_interval_ms", self.max_interval_ms),
        ] {
            if v == 0 {
                return Err(ConfigError::NotPositive { field });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn detector_params(&self) -> DetectorParams {
        DetectorParams {
            max_interval: Duration::from_millis(self.max_interval_ms),
            include_client_to_server: self.include_client_to_server,
        }
    }

    /// Per-worker capacity that keeps every session cached for at least
    /// `min_idle`, given the rate at which new flows appear. Doubled to
    /// absorb hash imbalance and bursts.
    pub fn capacity_for(new_flows_per_sec: f64, min_idle: Duration, workers: usize) -> usize {
        let live = new_flows_per_sec * min_idle.as_secs_f64();
        ((2.0 * live / workers as f64).ceil() as usize).max(1)
    }
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn endpoint_hash(ep: SocketAddrV4) -> u64 {
    mix64((u64::from(u32::from(*ep.ip())) << 16) | u64::from(ep.port()))
}

/// Worker index for a packet; both directions of a flow map to the same one.
pub fn dispatch(p: &PacketRecord, workers: usize) -> usize {
    assert!(workers >= 1, "dispatch needs at least one worker");
    let h = mix64(endpoint_hash(p.src).wrapping_add(endpoint_hash(p.dst)));
    (h % workers as u64) as usize
}

/// Session store evicting the entry with the oldest last activity.
#[derive(Debug)]
struct SessionCache {
    capacity: usize,
    sessions: HashMap<FlowKey, (Session, u64)>,
    idle_order: BTreeMap<(Timestamp, u64), FlowKey>,
    tick: u64,
}

impl SessionCache {
    fn new(capacity: usize) -> Self {
        SessionCache { capacity, sessions: HashMap::new(), idle_order: BTreeMap::new(), tick: 0 }
    }

    fn evict_idlest(&mut self) -> Option<Session> {
        let (_, key) = self.idle_order.pop_first()?;
        self.sessions.remove(&key).map(|(s, _)| s)
    }
}

#[derive(Debug)]
pub struct WorkerShard {
    pub id: usize,
    cache: SessionCache,
    history_bound: usize,
    params: DetectorParams,
    pub eviction_count: u64,
    pub min_observed_idle_at_eviction: Option<Duration>,
    pub packets_seen: u64,
}

impl WorkerShard {
    pub fn new(id: usize, config: &PipelineConfig) -> Self {
        WorkerShard {
            id,
            cache: SessionCache::new(config.cache_capacity),
            history_bound: config.history_bound,
            params: config.detector_params(),
            eviction_count: 0,
            min_observed_idle_at_eviction: None,
            packets_seen: 0,
        }
    }

    pub fn session(&self, key: &FlowKey) -> Option<&Session> {
        self.cache.sessions.get(key).map(|(s, _)| s)
    }

    pub fn session_count(&self) -> usize {
        self.cache.sessions.len()
    }

    /// Adds `p` to its session, running the race check against the packets
    /// already stored there.
    pub fn ingest(&mut self, p: PacketRecord) -> (&Session, Vec<RaceEvent>) {
        self.packets_seen += 1;
        let key = flow_key(&p);
        if !self.cache.sessions.contains_key(&key) {
            if self.cache.sessions.len() >= self.cache.capacity {
                if let Some(evicted) = self.cache.evict_idlest() {
                    self.eviction_count += 1;
                    let idle = Duration::from_micros(p.ts.0.saturating_sub(evicted.last_activity.0).max(0) as u64);
                    self.min_observed_idle_at_eviction =
                        Some(self.min_observed_idle_at_eviction.map_or(idle, |m| m.min(idle)));
                }
            }
            self.cache.tick += 1;
            let tick = self.cache.tick;
            self.cache.sessions.insert(key, (Session::new(key, p.ts), tick));
            self.cache.idle_order.insert((p.ts, tick), key);
        }
        let events = {
            let (session, _) = &self.cache.sessions[&key];
            check_race(&p, session, &self.params)
        };
        self.cache.tick += 1;
        let (session, tick) = self.cache.sessions.get_mut(&key).expect("cached session");
        self.cache.idle_order.remove(&(session.last_activity, *tick));
        session.push(p, self.history_bound);
        *tick = self.cache.tick;
        self.cache.idle_order.insert((session.last_activity, *tick), key);
        (&self.cache.sessions[&key].0, events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Reader, dispatcher and workers on separate threads with bounded queues.
    Threaded,
    /// Everything on the calling thread; same output as `Threaded`.
    Sequential,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ShardSummary {
    pub id: usize,
    pub packets: u64,
    pub sessions: usize,
    pub evictions: u64,
    pub min_idle_at_eviction_ms: Option<u64>,
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// Sorted by flow, then arrival of the later packet.
    pub events: Vec<RaceEvent>,
    pub shards: Vec<ShardSummary>,
}

impl PipelineOutput {
    pub fn min_idle_at_eviction(&self) -> Option<Duration> {
        self.shards.iter().filter_map(|s| s.min_idle_at_eviction_ms).min().map(Duration::from_millis)
    }

    pub fn evictions(&self) -> u64 {
        self.shards.iter().map(|s| s.evictions).sum()
    }
}

fn summarize(shard: &WorkerShard) -> ShardSummary {
    ShardSummary {
        id: shard.id,
        packets: shard.packets_seen,
        sessions: shard.session_count(),
        evictions: shard.eviction_count,
        min_idle_at_eviction_ms: shard.min_observed_idle_at_eviction.map(|d| d.as_millis() as u64),
    }
}

pub fn sort_events(events: &mut [RaceEvent]) {
    events.sort_by(|a, b| {
        (a.flow, a.second.ts, a.second.index, a.first.index).cmp(&(b.flow, b.second.ts, b.second.index, b.first.index))
    });
}

/// Runs packets through dispatcher and workers and collects every race.
pub fn run_pipeline<I>(packets: I, config: &PipelineConfig, mode: ExecutionMode) -> Result<PipelineOutput, ConfigError>
where
    I: IntoIterator<Item = PacketRecord> + Send,
    I::IntoIter: Send,
{
    config.validate()?;
    let mut out = match mode {
        ExecutionMode::Sequential => {
            let mut shards: Vec<WorkerShard> = (0..config.workers).map(|i| WorkerShard::new(i, config)).collect();
            let mut events = Vec::new();
            for p in packets {
                let w = dispatch(&p, config.workers);
                events.extend(shards[w].ingest(p).1);
            }
            PipelineOutput { events, shards: shards.iter().map(summarize).collect() }
        }
        ExecutionMode::Threaded => run_threaded(packets, config),
    };
    sort_events(&mut out.events);
    Ok(out)
}

fn run_threaded<I>(packets: I, config: &PipelineConfig) -> PipelineOutput
where
    I: IntoIterator<Item = PacketRecord> + Send,
    I::IntoIter: Send,
{
    let (capture_tx, capture_rx) = bounded::<Vec<PacketRecord>>(config.queue_bound);
    let mut worker_txs = Vec::with_capacity(config.workers);
    let mut worker_rxs = Vec::with_capacity(config.workers);
    for _ in 0..config.workers {
        let (tx, rx) = bounded::<Vec<PacketRecord>>(config.queue_bound);
        worker_txs.push(tx);
        worker_rxs.push(rx);
    }
    thread::scope(|scope| {
        scope.spawn(move || {
            let mut batch = Vec::with_capacity(BATCH);
            for p in packets {
                batch.push(p);
                if batch.len() == BATCH {
                    // blocks while the queue is full
                    if capture_tx.send(std::mem::replace(&mut batch, Vec::with_capacity(BATCH))).is_err() {
                        return;
                    }
                }
            }
            if !batch.is_empty() {
                let _ = capture_tx.send(batch);
            }
        });
        let workers: Vec<_> = worker_rxs
            .into_iter()
            .enumerate()
            .map(|(id, rx)| {
                scope.spawn(move || {
                    let mut shard = WorkerShard::new(id, config);
                    let mut events = Vec::new();
                    for batch in rx {
                        for p in batch {
                            events.extend(shard.ingest(p).1);
                        }
                    }
                    (summarize(&shard), events)
                })
            })
            .collect();
        let n = config.workers;
        let mut pending: Vec<Vec<PacketRecord>> = vec![Vec::new(); n];
        for batch in capture_rx {
            for p in batch {
                let w = dispatch(&p, n);
                pending[w].push(p);
                if pending[w].len() == BATCH {
                    let full = std::mem::replace(&mut pending[w], Vec::with_capacity(BATCH));
                    worker_txs[w].send(full).expect("worker alive");
                }
            }
        }
        for (w, rest) in pending.into_iter().enumerate() {
            if !rest.is_empty() {
                worker_txs[w].send(rest).expect("worker alive");
            }
        }
        drop(worker_txs);
        let mut shards = Vec::with_capacity(n);
        let mut events = Vec::new();
        for h in workers {
            let (summary, ev) = h.join().expect("worker panicked");
            shards.push(summary);
            events.extend(ev);
        }
        PipelineOutput { events, shards }
    })
}
