use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PacketError {
    #[error("malformed header: total length {total} < headers {headers}")]
    HeaderOverrun { total: u16, headers: u32 },
    #[error("payload is {actual} bytes but header lengths imply {expected}")]
    PayloadMismatch { expected: u32, actual: usize },
    #[error("ip header length {0} below 20 bytes")]
    ShortIpHeader(u32),
    #[error("tcp data offset {0} below 5 words")]
    ShortTcpHeader(u8),
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("{path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported capture format: {0}")]
    UnsupportedFormat(&'static str),
    #[error("unsupported link type {0} (only Ethernet is handled)")]
    UnsupportedLinkType(u32),
    #[error("pcap header truncated")]
    TruncatedHeader,
    #[error("evidence sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field} must be strictly positive")]
    NotPositive { field: &'static str },
    #[error("{field} must lie in [0, 1], got {value}")]
    OutOfUnitRange { field: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("corpus carries no injected/benign labels")]
    Unlabeled,
    #[error("label refers to packet {0}, which is not in the capture")]
    UnknownPacket(u64),
}
