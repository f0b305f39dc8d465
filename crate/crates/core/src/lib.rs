//! Offline forensics for out-of-band TCP/HTTP content injection.
//!
//! The crate reads classic pcap captures, groups packets into sessions,
//! detects packet races (overlapping, payload-divergent segments arriving
//! close together), decides which packet of a race was forged, localizes
//! the injecting hop, and replays captures through client-side mitigation.

pub mod analyze;
pub mod capture;
pub mod detect;
pub mod error;
pub mod http;
pub mod locate;
pub mod mitigate;
pub mod packet;
pub mod race;
pub mod synth;
pub mod tracker;
pub mod wire;

pub use analyze::{analyze, BenignRaceTag, Finding, FindingsReport, ForgeryVerdict, Pick};
pub use capture::{read_capture, write_evidence, CaptureSource, CaptureStats};
pub use detect::{detect, Detection};
pub use error::{CaptureError, ConfigError, MitigationError, PacketError, TableError};
pub use locate::{estimate_hops, locate, LocationFinding, PathTrace, PrefixTable};
pub use mitigate::{evaluate, LabelFile, MitigationMode, MitigationParams};
pub use packet::{
    derive_payload_bounds, flow_key, Direction, FlowKey, PacketRecord, SeqRange, Session, TcpFlags, Timestamp,
};
pub use race::{brute_force_oracle, check_race, DetectorParams, RaceEvent};
pub use synth::{generate, generate_ack_storm_scenario, LabeledCorpus, ScenarioSpec};
pub use tracker::{dispatch, run_pipeline, ExecutionMode, PipelineConfig, WorkerShard};
