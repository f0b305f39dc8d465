//! Capture to findings, end to end.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::analyze::{analyze, FindingsReport};
use crate::capture::write_evidence;
use crate::error::{CaptureError, ConfigError};
use crate::packet::{PacketRecord, Session};
use crate::race::RaceEvent;
use crate::tracker::{run_pipeline, ExecutionMode, PipelineConfig};

pub const FINDINGS_FILE: &str = "findings.json";
pub const TIMING_FILE: &str = "timing.csv";
pub const EVIDENCE_DIR: &str = "evidence";

#[derive(Debug, Clone)]
pub struct Detection {
    pub report: FindingsReport,
    /// Same order as the pipeline emitted them: by flow, then later arrival.
    pub events: Vec<RaceEvent>,
    pub evictions: u64,
}

pub fn detect<I>(packets: I, config: &PipelineConfig, mode: ExecutionMode) -> Result<Detection, ConfigError>
where
    I: IntoIterator<Item = PacketRecord> + Send,
    I::IntoIter: Send,
{
    let mut out = run_pipeline(packets, config, mode)?;
    let evictions = out.evictions();
    let report = analyze(&mut out.events);
    Ok(Detection { report, events: out.events, evictions })
}

/// Writes one evidence capture per injection finding under `dir/evidence`
/// and records its relative path in the finding.
pub fn write_injection_evidence(dir: &Path, detection: &mut Detection, anonymize: bool) -> Result<usize, CaptureError> {
    let by_id: HashMap<_, &RaceEvent> =
        detection.events.iter().map(|e| ((e.flow, e.first.index, e.second.index), e)).collect();
    let mut written = 0;
    for f in detection.report.findings.iter_mut().filter(|f| f.injection) {
        let Some(ev) = by_id.get(&(f.flow, f.first.index, f.second.index)) else {
            continue;
        };
        if written == 0 {
            fs::create_dir_all(dir.join(EVIDENCE_DIR))?;
        }
        let stem = format!("race_{}_{}", f.first.index, f.second.index);
        let session = Session::from_packets(ev.flow, ev.context.iter().cloned());
        let reason = format!("race between packets {} and {}", f.first.index, f.second.index);
        write_evidence(&dir.join(EVIDENCE_DIR).join(&stem), &session, &reason, anonymize)?;
        f.evidence = Some(format!("{EVIDENCE_DIR}/{stem}.pcap"));
        written += 1;
    }
    Ok(written)
}

pub fn write_report(dir: &Path, report: &FindingsReport) -> Result<(), CaptureError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(report).map_err(CaptureError::Sidecar)?;
    fs::write(dir.join(FINDINGS_FILE), json)?;
    let csv = BufWriter::new(fs::File::create(dir.join(TIMING_FILE))?);
    report.timing.write_csv(csv)?;
    Ok(())
}
