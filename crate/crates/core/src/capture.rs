//! Classic pcap input and output, HTTP port filtering, and evidence files.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CaptureError;
use crate::packet::{FlowKey, PacketRecord, Session, Timestamp, HTTP_PORT};
use crate::wire::{self, Skip};

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const DEFAULT_SNAPLEN: u32 = 65535;
/// Packets kept per evidence file.
pub const EVIDENCE_PACKETS: usize = 30;
pub const DETECTOR_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(&PCAP_MAGIC.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&0i32.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&DEFAULT_SNAPLEN.to_le_bytes())?;
        out.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
        Ok(PcapWriter { out })
    }

    pub fn write_frame(&mut self, ts: Timestamp, frame: &[u8]) -> io::Result<()> {
        let len = frame.len() as u32;
        self.out.write_all(&ts.secs_part().to_le_bytes())?;
        self.out.write_all(&ts.micros_part().to_le_bytes())?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(frame)
    }

    pub fn write_packet(&mut self, p: &PacketRecord) -> io::Result<()> {
        self.write_frame(p.ts, &wire::encode_frame(p))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// One raw record of a pcap file.
#[derive(Debug, Clone)]
pub struct RawFrame {
    pub ts: Timestamp,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

pub struct PcapReader<R: Read> {
    input: R,
    swapped: bool,
    pub snaplen: u32,
    pub truncated_records: u64,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut input: R) -> Result<Self, CaptureError> {
        let mut hdr = [0u8; 24];
        read_full(&mut input, &mut hdr).map_err(CaptureError::Io).and_then(|n| {
            if n < 24 {
                Err(CaptureError::TruncatedHeader)
            } else {
                Ok(())
            }
        })?;
        let magic = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let swapped = if magic == PCAP_MAGIC {
            false
        } else if magic.swap_bytes() == PCAP_MAGIC {
            true
        } else if magic == PCAP_MAGIC_NANOS || magic.swap_bytes() == PCAP_MAGIC_NANOS {
            return Err(CaptureError::UnsupportedFormat("nanosecond pcap"));
        } else if magic == 0x0a0d_0d0a {
            return Err(CaptureError::UnsupportedFormat("pcapng"));
        } else {
            return Err(CaptureError::BadMagic(magic));
        };
        let word = |at: usize| {
            let v = u32::from_le_bytes(hdr[at..at + 4].try_into().unwrap());
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };
        let snaplen = word(16);
        let link = word(20);
        if link != LINKTYPE_ETHERNET {
            return Err(CaptureError::UnsupportedLinkType(link));
        }
        Ok(PcapReader { input, swapped, snaplen, truncated_records: 0, done: false })
    }

    fn word(&self, b: &[u8]) -> u32 {
        let v = u32::from_le_bytes(b.try_into().unwrap());
        if self.swapped {
            v.swap_bytes()
        } else {
            v
        }
    }

    /// Next complete record; a short final record ends the stream and is
    /// counted in `truncated_records`.
    pub fn next_frame(&mut self) -> Result<Option<RawFrame>, CaptureError> {
        if self.done {
            return Ok(None);
        }
        let mut hdr = [0u8; 16];
        let n = read_full(&mut self.input, &mut hdr)?;
        if n == 0 {
            self.done = true;
            return Ok(None);
        }
        if n < 16 {
            self.done = true;
            self.truncated_records += 1;
            return Ok(None);
        }
        let secs = self.word(&hdr[0..4]);
        let micros = self.word(&hdr[4..8]);
        let incl = self.word(&hdr[8..12]) as usize;
        let orig_len = self.word(&hdr[12..16]);
        let mut data = vec![0u8; incl];
        if read_full(&mut self.input, &mut data)? < incl {
            self.done = true;
            self.truncated_records += 1;
            return Ok(None);
        }
        Ok(Some(RawFrame { ts: Timestamp::from_parts(secs, micros), orig_len, data }))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Frame source other than a file, e.g. a capture socket.
pub trait LiveAdapter: Send {
    fn next_frame(&mut self) -> io::Result<Option<RawFrame>>;
}

pub enum Origin {
    File(PathBuf),
    Live(Box<dyn LiveAdapter>),
}

/// Packet source plus the port predicate applied to it.
pub struct CaptureSource {
    pub origin: Origin,
    /// Keep packets with this port on either side; `None` keeps all TCP.
    pub port: Option<u16>,
}

impl CaptureSource {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        CaptureSource { origin: Origin::File(path.into()), port: Some(HTTP_PORT) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureStats {
    pub frames: u64,
    pub emitted: u64,
    pub skipped_not_ip: u64,
    pub skipped_ipv6: u64,
    pub skipped_not_tcp: u64,
    pub skipped_fragment: u64,
    pub skipped_malformed: u64,
    pub skipped_port_filter: u64,
    /// Packets whose captured bytes stop short of the IP length; these are
    /// dropped because their payload cannot be compared.
    pub snap_truncated: u64,
    pub truncated_records: u64,
}

impl CaptureStats {
    pub fn snaplen_limited(&self) -> bool {
        self.snap_truncated > 0
    }
}

enum FrameInput {
    File(PcapReader<BufReader<File>>),
    Bytes(PcapReader<io::Cursor<Vec<u8>>>),
    Live(Box<dyn LiveAdapter>),
}

/// Iterator of filtered packet records with running skip counters.
pub struct PacketStream {
    input: FrameInput,
    port: Option<u16>,
    next_index: u64,
    pub stats: CaptureStats,
    error: Option<CaptureError>,
}

impl PacketStream {
    fn next_raw(&mut self) -> Result<Option<RawFrame>, CaptureError> {
        match &mut self.input {
            FrameInput::File(r) => {
                let f = r.next_frame();
                self.stats.truncated_records = r.truncated_records;
                f
            }
            FrameInput::Bytes(r) => {
                let f = r.next_frame();
                self.stats.truncated_records = r.truncated_records;
                f
            }
            FrameInput::Live(a) => Ok(a.next_frame()?),
        }
    }

    /// I/O error that ended the stream early, if any.
    pub fn take_error(&mut self) -> Option<CaptureError> {
        self.error.take()
    }
}

impl Iterator for PacketStream {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        loop {
            let raw = match self.next_raw() {
                Ok(Some(raw)) => raw,
                Ok(None) => return None,
                Err(e) => {
                    self.error = Some(e);
                    return None;
                }
            };
            let index = self.next_index;
            self.next_index += 1;
            self.stats.frames += 1;
            let p = match wire::decode_frame(index, raw.ts, &raw.data) {
                Ok(p) => p,
                Err(skip) => {
                    let s = &mut self.stats;
                    match skip {
                        Skip::NotIp => s.skipped_not_ip += 1,
                        Skip::Ipv6 => s.skipped_ipv6 += 1,
                        Skip::NotTcp => s.skipped_not_tcp += 1,
                        Skip::Fragment => s.skipped_fragment += 1,
                        Skip::SnapTruncated => s.snap_truncated += 1,
                        Skip::Malformed => s.skipped_malformed += 1,
                    }
                    continue;
                }
            };
            if let Some(port) = self.port {
                if p.src.port() != port && p.dst.port() != port {
                    self.stats.skipped_port_filter += 1;
                    continue;
                }
            }
            self.stats.emitted += 1;
            return Some(p);
        }
    }
}

/// Opens a capture. Packet indices count every frame in the file, including
/// skipped ones, so they match frame numbers shown by other tools (minus one).
pub fn read_capture(source: CaptureSource) -> Result<PacketStream, CaptureError> {
    let input = match source.origin {
        Origin::File(path) => {
            let f = File::open(&path).map_err(|source| CaptureError::Open { path: path.clone(), source })?;
            FrameInput::File(PcapReader::new(BufReader::new(f))?)
        }
        Origin::Live(adapter) => FrameInput::Live(adapter),
    };
    Ok(PacketStream { input, port: source.port, next_index: 0, stats: CaptureStats::default(), error: None })
}

/// Reads a capture held in memory.
pub fn read_capture_bytes(bytes: Vec<u8>, port: Option<u16>) -> Result<PacketStream, CaptureError> {
    let input = FrameInput::Bytes(PcapReader::new(io::Cursor::new(bytes))?);
    Ok(PacketStream { input, port, next_index: 0, stats: CaptureStats::default(), error: None })
}

/// Reads every packet of a capture file.
pub fn read_all(path: &Path) -> Result<(Vec<PacketRecord>, CaptureStats), CaptureError> {
    let mut stream = read_capture(CaptureSource::file(path))?;
    let packets: Vec<_> = stream.by_ref().collect();
    if let Some(e) = stream.take_error() {
        return Err(e);
    }
    Ok((packets, stream.stats))
}

pub fn write_pcap<'a>(path: &Path, packets: impl IntoIterator<Item = &'a PacketRecord>) -> io::Result<()> {
    let mut w = PcapWriter::new(BufWriter::new(File::create(path)?))?;
    for p in packets {
        w.write_packet(p)?;
    }
    w.into_inner().flush()
}

pub fn pcap_bytes<'a>(packets: impl IntoIterator<Item = &'a PacketRecord>) -> Vec<u8> {
    let mut w = PcapWriter::new(Vec::new()).expect("vec write");
    for p in packets {
        w.write_packet(p).expect("vec write");
    }
    w.into_inner()
}

/// Zeroes the client address and both checksum fields.
///
/// The client is the non-port-80 endpoint. When the session has no unique
/// port-80 side both addresses are zeroed.
pub fn anonymize(p: &mut PacketRecord, key: &FlowKey) {
    let client = key.client();
    for ep in [&mut p.src, &mut p.dst] {
        if client.is_none_or(|c| *ep == c) {
            ep.set_ip(Ipv4Addr::UNSPECIFIED);
        }
    }
    p.ip_checksum = 0;
    p.tcp_checksum = 0;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceMeta {
    pub flow: FlowKey,
    pub reason: String,
    pub detector_version: String,
    pub anonymized: bool,
}

#[derive(Debug, Clone)]
pub struct EvidenceFile {
    pub pcap: PathBuf,
    pub sidecar: PathBuf,
    pub packets: usize,
    pub meta: EvidenceMeta,
}

/// Writes the last 30 packets of `session` to `<stem>.pcap` plus a JSON
/// sidecar `<stem>.json`.
pub fn write_evidence(
    stem: &Path,
    session: &Session,
    reason: &str,
    anonymized: bool,
) -> Result<EvidenceFile, CaptureError> {
    let skip = session.packets.len().saturating_sub(EVIDENCE_PACKETS);
    let mut packets: Vec<PacketRecord> = session.packets.iter().skip(skip).cloned().collect();
    if anonymized {
        for p in &mut packets {
            anonymize(p, &session.key);
        }
    }
    let pcap = stem.with_extension("pcap");
    let sidecar = stem.with_extension("json");
    write_pcap(&pcap, &packets)?;
    let meta = EvidenceMeta {
        flow: session.key,
        reason: reason.to_owned(),
        detector_version: DETECTOR_VERSION.to_owned(),
        anonymized,
    };
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?)?;
    Ok(EvidenceFile { pcap, sidecar, packets: packets.len(), meta })
}
