//! Deterministic labeled corpora.
//!
//! Every session is a small HTTP exchange seen from the client's border:
//! handshake, one GET, a response of one to three segments, and a FIN
//! exchange. Injected sessions add a forged response segment at the first
//! response sequence number. Benign sessions may carry one retransmission
//! pattern that races without being an injection.
//!
//! All randomness comes from one ChaCha8 stream seeded by `ScenarioSpec::seed`.

use std::collections::{BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::time::{Duration, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::{BenignRaceTag, SCHEMA_VERSION};
use crate::capture::write_pcap;
use crate::error::{CaptureError, ConfigError};
use crate::mitigate::{Label, LabelFile};
use crate::packet::{FlowKey, PacketRecord, TcpFlags, Timestamp, HTTP_PORT};

/// 2015-01-01T00:00:00Z.
const EPOCH_SECS: i64 = 1_420_070_400;
const MSS: usize = 1460;
const SESSION_SPACING_US: i64 = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtlMode {
    Anomalous,
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdMode {
    Random,
    DupServer,
    DupClient,
    ByteswapClient,
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confounder {
    LoadBalancerCookie,
    AcceptRangesFlip,
    NonstandardXHeader,
    SeqOffsetRetransmit,
    NoncompliantTcp,
}

impl Confounder {
    pub const ALL: [Confounder; 5] = [
        Confounder::LoadBalancerCookie,
        Confounder::AcceptRangesFlip,
        Confounder::NonstandardXHeader,
        Confounder::SeqOffsetRetransmit,
        Confounder::NoncompliantTcp,
    ];

    pub fn tag(self) -> BenignRaceTag {
        match self {
            Confounder::LoadBalancerCookie => BenignRaceTag::LoadBalancerCookie,
            Confounder::AcceptRangesFlip => BenignRaceTag::AcceptRangesFlip,
            Confounder::NonstandardXHeader => BenignRaceTag::NonstandardXHeader,
            Confounder::SeqOffsetRetransmit => BenignRaceTag::SeqOffsetRetransmit,
            Confounder::NoncompliantTcp => BenignRaceTag::NoncompliantTcp,
        }
    }
}

/// Magnitude of |legitimate - forged| arrival, drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaDistribution {
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Field-like disorder in the server's own packets: per-packet TTL jitter of
/// up to `ttl_jitter` either way, and IP-ID counter jumps of up to
/// `id_jump_max` with probability `id_jump_probability` per packet. Forged
/// random IDs are then drawn from the whole ID space instead of far away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldNoise {
    pub ttl_jitter: u8,
    pub id_jump_max: u16,
    pub id_jump_probability: f64,
}

impl Default for FieldNoise {
    fn default() -> Self {
        FieldNoise { ttl_jitter: 2, id_jump_max: 3000, id_jump_probability: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub session_count: usize,
    pub injection_fraction: f64,
    pub forged_first_fraction: f64,
    pub delta_distribution: DeltaDistribution,
    pub forged_ttl_mode: TtlMode,
    pub forged_id_mode: IdMode,
    /// Benign sessions cycle through these, one pattern each.
    pub benign_confounders: BTreeSet<Confounder>,
    pub injector_closes_with_rst: bool,
    pub field_noise: Option<FieldNoise>,
    /// Oversized forgeries followed by this many ACK ping-pong rounds.
    pub ack_storm_rounds: Option<u32>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 0,
            session_count: 100,
            injection_fraction: 0.2,
            forged_first_fraction: 0.68,
            delta_distribution: DeltaDistribution { min_ms: 1.0, max_ms: 80.0 },
            forged_ttl_mode: TtlMode::Anomalous,
            forged_id_mode: IdMode::Random,
            benign_confounders: BTreeSet::new(),
            injector_closes_with_rst: false,
            field_noise: None,
            ack_storm_rounds: None,
        }
    }
}

fn unit(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::OutOfUnitRange { field, value })
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        unit("injection_fraction", self.injection_fraction)?;
        unit("forged_first_fraction", self.forged_first_fraction)?;
        let d = self.delta_distribution;
        if !(d.min_ms.is_finite() && d.max_ms.is_finite() && d.min_ms >= 0.0 && d.min_ms <= d.max_ms) {
            return Err(ConfigError::Invalid(format!("delta_distribution needs 0 <= min_ms <= max_ms, got {d:?}")));
        }
        if let Some(n) = self.field_noise {
            unit("field_noise.id_jump_probability", n.id_jump_probability)?;
            if n.ttl_jitter > 16 {
                return Err(ConfigError::Invalid("field_noise.ttl_jitter above 16".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn injected_sessions(&self) -> usize {
        (self.session_count as f64 * self.injection_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgedTemplate {
    Redirect,
    MetaRefresh,
    ScriptSubstitution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionTruth {
    pub forged_index: u64,
    pub legit_index: u64,
    pub rst_index: Option<u64>,
    pub forged_first: bool,
    /// Legitimate minus forged arrival.
    pub delta_us: i64,
    pub ttl_mode: TtlMode,
    pub id_mode: IdMode,
    pub template: ForgedTemplate,
    pub group_key: String,
    pub forged_ttl: u8,
    pub forged_id: u16,
    pub injector_hops: u8,
    pub ack_storm_rounds: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub session: usize,
    pub flow: FlowKey,
    pub injection: Option<InjectionTruth>,
    pub confounder: Option<Confounder>,
    /// Indices of the one race the session is built to contain, in arrival order.
    pub expected_race: Option<(u64, u64)>,
    pub server_hops: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTruth {
    pub schema_version: u32,
    pub spec: ScenarioSpec,
    pub sessions: Vec<SessionTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    /// Sorted by timestamp; `index` is the position.
    pub packets: Vec<PacketRecord>,
    pub labels: LabelFile,
    pub truth: CorpusTruth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub pcap: PathBuf,
    pub labels: PathBuf,
    pub truth: PathBuf,
}

impl CorpusPaths {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        CorpusPaths {
            pcap: dir.join(format!("{stem}.pcap")),
            labels: dir.join(format!("{stem}.labels.json")),
            truth: dir.join(format!("{stem}.truth.json")),
        }
    }
}

impl LabeledCorpus {
    pub fn write(&self, dir: &Path, stem: &str) -> Result<CorpusPaths, CaptureError> {
        let paths = CorpusPaths::for_stem(dir, stem);
        write_pcap(&paths.pcap, &self.packets)?;
        let labels = serde_json::to_vec_pretty(&self.labels).map_err(CaptureError::Sidecar)?;
        std::fs::write(&paths.labels, labels)?;
        let truth = serde_json::to_vec_pretty(&self.truth).map_err(CaptureError::Sidecar)?;
        std::fs::write(&paths.truth, truth)?;
        Ok(paths)
    }

    pub fn injections(&self) -> impl Iterator<Item = &InjectionTruth> {
        self.truth.sessions.iter().filter_map(|s| s.injection.as_ref())
    }
}

fn http_date(ts: Timestamp) -> String {
    httpdate::fmt_http_date(UNIX_EPOCH + Duration::from_secs(ts.secs_part() as u64))
}

fn ms(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

fn printable(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 ";
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

fn forged_payload(template: ForgedTemplate, variant: u8, ts: Timestamp) -> Vec<u8> {
    let date = http_date(ts);
    match template {
        ForgedTemplate::Redirect => format!(
            "HTTP/1.1 302 Found\r\nLocation: http://promo{variant}.example.net/landing?src=inj\r\nContent-Length: 0\r\nDate: {date}\r\nConnection: close\r\n\r\n"
        )
        .into_bytes(),
        ForgedTemplate::MetaRefresh => {
            let body = format!(
                "<html><head><meta http-equiv=\"refresh\" content=\"0;url=http://portal{variant}.example.org/\"></head><body></body></html>"
            );
            format!(
                "HTTP/1.1 200 OK\r\nContent-Type: text/html\r\nDate: {date}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .into_bytes()
        }
        ForgedTemplate::ScriptSubstitution => {
            let body = format!("document.write('<script src=\"http://cdn{variant}.example.com/a.js\"></script>');");
            format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/javascript\r\nDate: {date}\r\nContent-Length: {}\r\n\r\n{body}",
                body.len()
            )
            .into_bytes()
        }
    }
}

fn template_name(t: ForgedTemplate) -> &'static str {
    match t {
        ForgedTemplate::Redirect => "redirect",
        ForgedTemplate::MetaRefresh => "meta_refresh",
        ForgedTemplate::ScriptSubstitution => "script_substitution",
    }
}

/// Legitimate response with a body of `body_len` bytes and `extra` headers.
fn legit_response(rng: &mut ChaCha8Rng, ts: Timestamp, body_len: usize, extra: &str) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 200 OK\r\nServer: nginx\r\nDate: {}\r\nContent-Type: text/html\r\nContent-Length: {body_len}\r\n{extra}\r\n",
        http_date(ts)
    )
    .into_bytes();
    out.extend(printable(rng, body_len));
    out
}

struct Staged {
    packet: PacketRecord,
    label: Label,
}

/// One session under construction. Server IDs follow a per-destination
/// counter, client IDs likewise.
struct SessionBuilder<'r> {
    rng: &'r mut ChaCha8Rng,
    server: SocketAddrV4,
    client: SocketAddrV4,
    server_ttl: u8,
    client_ttl: u8,
    noise: Option<FieldNoise>,
    server_id: u16,
    client_id: u16,
    staged: Vec<Staged>,
}

impl<'r> SessionBuilder<'r> {
    fn next_server_id(&mut self) -> u16 {
        let id = self.server_id;
        let mut step = 1u16;
        if let Some(n) = self.noise {
            if n.id_jump_max > 0 && self.rng.gen_bool(n.id_jump_probability) {
                step += self.rng.gen_range(1..=n.id_jump_max);
            }
        }
        self.server_id = self.server_id.wrapping_add(step);
        id
    }

    fn server_ttl_now(&mut self) -> u8 {
        match self.noise {
            Some(n) if n.ttl_jitter > 0 => {
                let j = i16::from(n.ttl_jitter);
                (i16::from(self.server_ttl) + self.rng.gen_range(-j..=j)).clamp(1, 255) as u8
            }
            _ => self.server_ttl,
        }
    }

    fn push(&mut self, packet: PacketRecord, label: Label) -> usize {
        self.staged.push(Staged { packet, label });
        self.staged.len() - 1
    }

    fn server(&mut self, ts: Timestamp, seq: u32, ack: u32, flags: TcpFlags, payload: Vec<u8>) -> usize {
        let (ttl, id) = (self.server_ttl_now(), self.next_server_id());
        let p = PacketRecord::tcp(ts, self.server, self.client, seq, ack, flags, payload).with_ttl(ttl).with_ip_id(id);
        self.push(p, Label::Benign)
    }

    fn client(&mut self, ts: Timestamp, seq: u32, ack: u32, flags: TcpFlags, payload: Vec<u8>) -> usize {
        let id = self.client_id;
        self.client_id = self.client_id.wrapping_add(1);
        let p = PacketRecord::tcp(ts, self.client, self.server, seq, ack, flags, payload)
            .with_ttl(self.client_ttl)
            .with_ip_id(id);
        self.push(p, Label::Benign)
    }

    /// `ip` is the forged (ttl, id) pair.
    fn forged(&mut self, ts: Timestamp, seq: u32, ack: u32, flags: TcpFlags, payload: Vec<u8>, ip: (u8, u16)) -> usize {
        let (ttl, id) = ip;
        let p = PacketRecord::tcp(ts, self.server, self.client, seq, ack, flags, payload).with_ttl(ttl).with_ip_id(id);
        self.push(p, Label::Injected)
    }

    fn ids(&self, from_server: bool) -> Vec<u16> {
        self.staged
            .iter()
            .filter(|s| s.label == Label::Benign && (s.packet.src == self.server) == from_server)
            .map(|s| s.packet.ip_id)
            .collect()
    }

    /// No two legitimate packets share an ID, and no client ID byte-swapped
    /// lands on another legitimate ID.
    fn ids_clean(&self) -> bool {
        let server = self.ids(true);
        let client = self.ids(false);
        let mut seen = BTreeSet::new();
        if !server.iter().chain(&client).all(|id| seen.insert(*id)) {
            return false;
        }
        client.iter().all(|c| {
            let s = c.swap_bytes();
            s == *c || !seen.contains(&s)
        })
    }
}

/// Handshake and request; returns (time of GET, client next seq, server ISN).
struct Opened {
    t_get: Timestamp,
    get_local: usize,
    client_next: u32,
    server_isn: u32,
}

fn open(b: &mut SessionBuilder<'_>, t0: Timestamp, rtt_us: i64, path: &str, host: &str) -> Opened {
    let c_isn: u32 = b.rng.gen();
    let s_isn: u32 = b.rng.gen();
    b.client(t0, c_isn, 0, TcpFlags::SYN, Vec::new());
    let t_synack = t0.offset_micros(rtt_us);
    b.server(t_synack, s_isn, c_isn.wrapping_add(1), TcpFlags::SYN | TcpFlags::ACK, Vec::new());
    let t_ack = t_synack.offset_micros(100 + b.rng.gen_range(0..200));
    b.client(t_ack, c_isn.wrapping_add(1), s_isn.wrapping_add(1), TcpFlags::ACK, Vec::new());
    let t_get = t_ack.offset_micros(1000);
    let req = format!(
        "GET /{path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0 (synthetic)\r\nAccept: */*\r\nConnection: keep-alive\r\n\r\n"
    )
    .into_bytes();
    let len = req.len() as u32;
    let get_local = b.client(t_get, c_isn.wrapping_add(1), s_isn.wrapping_add(1), TcpFlags::PSH | TcpFlags::ACK, req);
    let client_next = c_isn.wrapping_add(1).wrapping_add(len);
    b.server(t_get.offset_micros(rtt_us), s_isn.wrapping_add(1), client_next, TcpFlags::ACK, Vec::new());
    Opened { t_get, get_local, client_next, server_isn: s_isn }
}

/// Splits `response` into MSS segments sent from `t_resp`, each acked by
/// the client. Returns the local indices and the server's next seq.
fn send_response(b: &mut SessionBuilder<'_>, o: &Opened, t_resp: Timestamp, response: &[u8]) -> (Vec<usize>, u32) {
    let mut seq = o.server_isn.wrapping_add(1);
    let mut locals = Vec::new();
    for (k, chunk) in response.chunks(MSS).enumerate() {
        let ts = t_resp.offset_micros(200 * k as i64);
        locals.push(b.server(ts, seq, o.client_next, TcpFlags::PSH | TcpFlags::ACK, chunk.to_vec()));
        seq = seq.wrapping_add(chunk.len() as u32);
        b.client(ts.offset_micros(50), o.client_next, seq, TcpFlags::ACK, Vec::new());
    }
    (locals, seq)
}

fn close(b: &mut SessionBuilder<'_>, o: &Opened, t_fin: Timestamp, server_next: u32, rtt_us: i64) {
    b.server(t_fin, server_next, o.client_next, TcpFlags::FIN | TcpFlags::ACK, Vec::new());
    b.client(
        t_fin.offset_micros(100),
        o.client_next,
        server_next.wrapping_add(1),
        TcpFlags::FIN | TcpFlags::ACK,
        Vec::new(),
    );
    b.server(
        t_fin.offset_micros(rtt_us),
        server_next.wrapping_add(1),
        o.client_next.wrapping_add(1),
        TcpFlags::ACK,
        Vec::new(),
    );
}

struct Built {
    staged: Vec<Staged>,
    injection: Option<(usize, usize, Option<usize>, InjectionTruth)>,
    race: Option<(usize, usize)>,
    server_hops: u8,
}

struct SessionPlan {
    t0: Timestamp,
    server: SocketAddrV4,
    client: SocketAddrV4,
    kind: PlanKind,
}

enum PlanKind {
    Plain,
    Injected,
    Confounder(Confounder),
}

struct Generator<'s> {
    spec: &'s ScenarioSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn build(&mut self, plan: &SessionPlan) -> Built {
        // retry until the drawn IDs are free of accidental coincidences
        loop {
            let server_hops = self.rng.gen_range(6..=20u8);
            let client_ttl = *[63u8, 127].choose(&mut self.rng).expect("nonempty");
            let noise = self.spec.field_noise;
            let id_ceiling = if noise.is_some() { 30_000 } else { 65_000 };
            let mut b = SessionBuilder {
                server_id: self.rng.gen_range(0..id_ceiling),
                client_id: self.rng.gen(),
                rng: &mut self.rng,
                server: plan.server,
                client: plan.client,
                server_ttl: 64 - server_hops,
                client_ttl,
                noise,
                staged: Vec::new(),
            };
            let built = match plan.kind {
                PlanKind::Plain => plain_session(&mut b, plan.t0),
                PlanKind::Injected => injected_session(&mut b, plan.t0, self.spec, server_hops),
                PlanKind::Confounder(c) => confounder_session(&mut b, plan.t0, c),
            };
            if let Some(mut built) = built {
                if b.ids_clean() {
                    built.staged = std::mem::take(&mut b.staged);
                    built.server_hops = server_hops;
                    return built;
                }
            }
        }
    }
}

fn rtt(b: &mut SessionBuilder<'_>) -> i64 {
    10_000 + b.rng.gen_range(0..20_000)
}

fn plain_session(b: &mut SessionBuilder<'_>, t0: Timestamp) -> Option<Built> {
    let r = rtt(b);
    let n = b.rng.gen_range(0..1000);
    let o = open(b, t0, r, &format!("page{n}.html"), "www.example.com");
    let t_resp = o.t_get.offset_micros(r + b.rng.gen_range(1_000..30_000));
    let body_len = b.rng.gen_range(800..4000);
    let response = legit_response(b.rng, t_resp, body_len, "");
    let (locals, next) = send_response(b, &o, t_resp, &response);
    close(b, &o, t_resp.offset_micros(200 * locals.len() as i64 + 2000), next, r);
    Some(Built { staged: Vec::new(), injection: None, race: None, server_hops: 0 })
}

fn injected_session(b: &mut SessionBuilder<'_>, t0: Timestamp, spec: &ScenarioSpec, server_hops: u8) -> Option<Built> {
    let r = rtt(b);
    let storm = spec.ack_storm_rounds;
    let forged_first = storm.is_some() || b.rng.gen_bool(spec.forged_first_fraction);
    let d = spec.delta_distribution;
    let (lo, hi) = (ms(d.min_ms), ms(d.max_ms));
    let delta = if lo == hi { lo } else { b.rng.gen_range(lo..=hi) };
    let template = *[ForgedTemplate::Redirect, ForgedTemplate::MetaRefresh, ForgedTemplate::ScriptSubstitution]
        .choose(b.rng)
        .expect("nonempty");
    let variant = b.rng.gen_range(1..=3u8);
    let script = template == ForgedTemplate::ScriptSubstitution;
    let (path, host) = if script { ("js/stat.js", "s.example.com") } else { ("index.html", "www.example.com") };
    let o = open(b, t0, r, path, host);

    // legitimate response is the server's and is not delayed by the injector
    let mut t_resp = o.t_get.offset_micros(r + b.rng.gen_range(1_000..30_000));
    if forged_first && t_resp - o.t_get <= delta + 500 {
        t_resp = o.t_get.offset_micros(delta + 500 + b.rng.gen_range(0..5_000));
    }
    let t_forged = if forged_first { t_resp.offset_micros(-delta) } else { t_resp.offset_micros(delta) };
    let forged_bytes = forged_payload(template, variant, t_forged);
    let body_len = if storm.is_some() {
        // oversized forgery: legitimate response shorter than the forged one
        let head = legit_response(b.rng, t_resp, 0, "").len();
        let target = forged_bytes.len().saturating_sub(head + 20 + b.rng.gen_range(0..40)).max(1);
        target.min(forged_bytes.len() - head - 1)
    } else {
        b.rng.gen_range(800..4000)
    };
    let response = legit_response(b.rng, t_resp, body_len, "");
    if storm.is_some() != (forged_bytes.len() > response.len().min(MSS)) {
        return None;
    }

    let mut injector_hops = b.rng.gen_range(3..=25u8);
    while injector_hops.abs_diff(server_hops) < 3 {
        injector_hops = b.rng.gen_range(3..=25u8);
    }
    let forged_ttl = match spec.forged_ttl_mode {
        TtlMode::Anomalous => 64 - injector_hops,
        TtlMode::Aligned => 64 - server_hops,
    };

    let seq = o.server_isn.wrapping_add(1);
    let forged_len = forged_bytes.len() as u32;
    let (locals, next) = send_response(b, &o, t_resp, &response);
    let legit_local = locals[0];
    let get_id = b.staged[o.get_local].packet.ip_id;
    let syn_ack_id = b.staged[1].packet.ip_id;
    let legit_id = b.staged[legit_local].packet.ip_id;
    let forged_id = match spec.forged_id_mode {
        IdMode::DupServer => syn_ack_id,
        IdMode::DupClient => get_id,
        IdMode::ByteswapClient => {
            if get_id.swap_bytes() == get_id {
                return None;
            }
            get_id.swap_bytes()
        }
        IdMode::Aligned => legit_id,
        IdMode::Random => {
            let server_ids = b.ids(true);
            let client_ids = b.ids(false);
            let far = if spec.field_noise.is_some() { 0 } else { 8000 };
            let mut id: u16 = b.rng.gen();
            let ok = |id: u16| {
                server_ids.iter().all(|s| s.abs_diff(id) > far && *s != id)
                    && client_ids.iter().all(|c| *c != id && c.swap_bytes() != id)
                    && !server_ids.contains(&id.wrapping_add(1))
            };
            let mut tries = 0;
            while !ok(id) {
                id = b.rng.gen();
                tries += 1;
                if tries > 1000 {
                    return None;
                }
            }
            id
        }
    };
    let forged_local =
        b.forged(t_forged, seq, o.client_next, TcpFlags::PSH | TcpFlags::ACK, forged_bytes, (forged_ttl, forged_id));
    let mut rst_local = None;
    if spec.injector_closes_with_rst {
        let id = forged_id.wrapping_add(1);
        rst_local = Some(b.forged(
            t_forged.offset_micros(20),
            seq.wrapping_add(forged_len),
            o.client_next,
            TcpFlags::RST | TcpFlags::ACK,
            Vec::new(),
            (forged_ttl, id),
        ));
    }
    if forged_first {
        b.client(t_forged.offset_micros(50), o.client_next, seq.wrapping_add(forged_len), TcpFlags::ACK, Vec::new());
    }
    let mut t_last = t_resp.offset_micros(200 * locals.len() as i64);
    if let Some(rounds) = storm {
        // each round: the server re-acks its own send point, the client
        // re-acks the forged end it believes it received
        for k in 0..rounds {
            let t = t_last.offset_micros(500 * (i64::from(k) + 1));
            b.server(t, next, o.client_next, TcpFlags::ACK, Vec::new());
            b.client(t.offset_micros(50), o.client_next, seq.wrapping_add(forged_len), TcpFlags::ACK, Vec::new());
        }
        t_last = t_last.offset_micros(500 * (i64::from(rounds) + 1));
    }
    if !forged_first {
        t_last = t_last.max(t_forged);
    }
    close(b, &o, t_last.offset_micros(2000), next, r);

    let (first, second) = if forged_first { (forged_local, legit_local) } else { (legit_local, forged_local) };
    let truth = InjectionTruth {
        forged_index: 0,
        legit_index: 0,
        rst_index: None,
        forged_first,
        delta_us: if forged_first { delta } else { -delta },
        ttl_mode: spec.forged_ttl_mode,
        id_mode: spec.forged_id_mode,
        template,
        group_key: format!("{}:{variant}", template_name(template)),
        forged_ttl,
        forged_id,
        injector_hops,
        ack_storm_rounds: storm,
    };
    Some(Built {
        staged: Vec::new(),
        injection: Some((forged_local, legit_local, rst_local, truth)),
        race: Some((first, second)),
        server_hops,
    })
}

fn confounder_session(b: &mut SessionBuilder<'_>, t0: Timestamp, c: Confounder) -> Option<Built> {
    if c == Confounder::NoncompliantTcp {
        return noncompliant_session(b, t0);
    }
    let r = rtt(b);
    let o = open(b, t0, r, "index.html", "www.example.com");
    let t_resp = o.t_get.offset_micros(r + b.rng.gen_range(1_000..30_000));
    let body_len = b.rng.gen_range(800..4000);
    let server_a = b.rng.gen_range(10..50);
    let server_b = server_a + 50;
    let edge_a = b.rng.gen_range(1000..5000);
    let edge_b = edge_a + 4000;
    let (extra_first, extra_retx) = match c {
        Confounder::LoadBalancerCookie => (
            format!("Set-Cookie: SRVID=web{server_a}; Path=/\r\n"),
            format!("Set-Cookie: SRVID=web{server_b}; Path=/\r\n"),
        ),
        Confounder::AcceptRangesFlip => ("Accept-Ranges: none\r\n".to_string(), "Accept-Ranges: bytes\r\n".to_string()),
        Confounder::NonstandardXHeader => {
            (format!("X-Served-By: cache-fra{edge_a}\r\n"), format!("X-Served-By: cache-fra{edge_b}\r\n"))
        }
        _ => (String::new(), String::new()),
    };
    let mut body_rng = ChaCha8Rng::seed_from_u64(b.rng.gen());
    let response = legit_response(&mut body_rng.clone(), t_resp, body_len, &extra_first);
    let (locals, next) = send_response(b, &o, t_resp, &response);
    let seg1 = b.staged[locals[0]].packet.clone();
    let (retx_seq, mut retx_payload) = if c == Confounder::SeqOffsetRetransmit {
        (seg1.tcp_seq.wrapping_add(1), seg1.payload[..seg1.payload.len() - 1].to_vec())
    } else {
        (seg1.tcp_seq, legit_response(&mut body_rng, t_resp, body_len, &extra_retx))
    };
    // never reach past the original segment
    retx_payload.truncate(seg1.payload.len());
    let t_retx = t_resp.offset_micros(b.rng.gen_range(20_000..150_000));
    let retx = b.server(t_retx, retx_seq, o.client_next, TcpFlags::PSH | TcpFlags::ACK, retx_payload);
    b.client(t_retx.offset_micros(50), o.client_next, next, TcpFlags::ACK, Vec::new());
    close(b, &o, t_retx.offset_micros(2000), next, r);
    Some(Built { staged: Vec::new(), injection: None, race: Some((locals[0], retx)), server_hops: 0 })
}

/// Mid-stream traffic with no handshake, gapped sequence numbers, an
/// overlapping rewrite and acknowledgments that match nothing sent.
fn noncompliant_session(b: &mut SessionBuilder<'_>, t0: Timestamp) -> Option<Built> {
    let seq_a: u32 = b.rng.gen();
    let ack: u32 = b.rng.gen();
    let len_a = b.rng.gen_range(300..800);
    let mut pa: Vec<u8> = (0..len_a).map(|_| b.rng.gen()).collect();
    pa[0] = 0x17;
    let a = b.server(t0, seq_a, ack, TcpFlags::PSH | TcpFlags::ACK, pa.clone());
    let top_a = seq_a.wrapping_add(len_a as u32);
    let seq_b = top_a.wrapping_add(b.rng.gen_range(100..5000));
    let len_b = b.rng.gen_range(100..800);
    let mut pb: Vec<u8> = (0..len_b).map(|_| b.rng.gen()).collect();
    pb[0] = 0x17;
    b.server(t0.offset_micros(500), seq_b, ack, TcpFlags::PSH | TcpFlags::ACK, pb);
    let top_b = seq_b.wrapping_add(len_b as u32);
    let k = b.rng.gen_range(2..len_a / 2);
    let len_c = b.rng.gen_range(16..=len_a - k);
    let mut pc: Vec<u8> = (0..len_c).map(|_| b.rng.gen()).collect();
    pc[0] = pa[k] ^ 0x55;
    let mut bogus: u32 = b.rng.gen();
    let t_c = t0.offset_micros(b.rng.gen_range(10_000..150_000));
    let top_c = seq_a.wrapping_add((k + len_c) as u32);
    while [top_a, top_b, top_c].contains(&bogus) {
        bogus = bogus.wrapping_add(1);
    }
    let t_ack = t0.offset_micros(b.rng.gen_range(1_000..9_000));
    b.client(t_ack, ack, bogus, TcpFlags::ACK, Vec::new());
    let c = b.server(t_c, seq_a.wrapping_add(k as u32), ack, TcpFlags::PSH | TcpFlags::ACK, pc);
    Some(Built { staged: Vec::new(), injection: None, race: Some((a, c)), server_hops: 0 })
}

fn client_addr(i: usize, port: u16) -> SocketAddrV4 {
    let i = i as u32 + 1;
    SocketAddrV4::new(Ipv4Addr::new(10, (i >> 16) as u8, (i >> 8) as u8, i as u8), port)
}

fn server_addr(rng: &mut ChaCha8Rng) -> SocketAddrV4 {
    let ip =
        if rng.gen_bool(0.5) { [203, 0, 113, rng.gen_range(1..255)] } else { [198, 51, 100, rng.gen_range(1..255)] };
    SocketAddrV4::new(Ipv4Addr::from(ip), HTTP_PORT)
}

/// Generates the corpus described by `spec`. The spec is assumed valid.
pub fn generate(spec: &ScenarioSpec) -> LabeledCorpus {
    let mut g = Generator { spec, rng: ChaCha8Rng::seed_from_u64(spec.seed) };
    let mut order: Vec<usize> = (0..spec.session_count).collect();
    order.shuffle(&mut g.rng);
    let injected: BTreeSet<usize> = order.into_iter().take(spec.injected_sessions()).collect();
    let confounders: Vec<Confounder> = spec.benign_confounders.iter().copied().collect();

    let mut staged: Vec<(usize, usize, Staged)> = Vec::new();
    let mut built_sessions = Vec::new();
    let mut benign_seen = 0usize;
    for i in 0..spec.session_count {
        let kind = if injected.contains(&i) {
            PlanKind::Injected
        } else if confounders.is_empty() {
            PlanKind::Plain
        } else {
            benign_seen += 1;
            PlanKind::Confounder(confounders[(benign_seen - 1) % confounders.len()])
        };
        let plan = SessionPlan {
            t0: Timestamp::from_parts(EPOCH_SECS as u32, 0)
                .offset_micros(i as i64 * SESSION_SPACING_US + g.rng.gen_range(0..3_000)),
            client: client_addr(i, g.rng.gen_range(1025..=65000)),
            server: server_addr(&mut g.rng),
            kind,
        };
        let confounder = match plan.kind {
            PlanKind::Confounder(c) => Some(c),
            _ => None,
        };
        let mut built = g.build(&plan);
        for (local, s) in std::mem::take(&mut built.staged).into_iter().enumerate() {
            staged.push((i, local, s));
        }
        built_sessions.push((i, flow_key_of(&plan), confounder, built));
    }

    staged.sort_by_key(|(session, local, s)| (s.packet.ts, *session, *local));
    let mut global: HashMap<(usize, usize), u64> = HashMap::with_capacity(staged.len());
    let mut packets = Vec::with_capacity(staged.len());
    let mut labels = LabelFile { schema_version: SCHEMA_VERSION, labels: Default::default() };
    for (index, (session, local, s)) in staged.into_iter().enumerate() {
        let index = index as u64;
        global.insert((session, local), index);
        labels.labels.insert(index, s.label);
        packets.push(s.packet.with_index(index));
    }
    let sessions = built_sessions
        .into_iter()
        .map(|(i, flow, confounder, built)| {
            let at = |local: usize| global[&(i, local)];
            SessionTruth {
                session: i,
                flow,
                injection: built.injection.map(|(forged, legit, rst, mut t)| {
                    t.forged_index = at(forged);
                    t.legit_index = at(legit);
                    t.rst_index = rst.map(at);
                    t
                }),
                confounder,
                expected_race: built.race.map(|(x, y)| (at(x), at(y))),
                server_hops: built.server_hops,
            }
        })
        .collect();
    LabeledCorpus {
        packets,
        labels,
        truth: CorpusTruth { schema_version: SCHEMA_VERSION, spec: spec.clone(), sessions },
    }
}

fn flow_key_of(plan: &SessionPlan) -> FlowKey {
    FlowKey::new(plan.server, plan.client)
}

/// Oversized injections followed by ACK ping-pong; `ack_storm_rounds`
/// defaults to zero rounds.
pub fn generate_ack_storm_scenario(spec: &ScenarioSpec) -> LabeledCorpus {
    let mut spec = spec.clone();
    spec.ack_storm_rounds = Some(spec.ack_storm_rounds.unwrap_or(0));
    generate(&spec)
}
