//! Subcommands behind the `racetrace` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use racetrace::analyze::{FindingsReport, SCHEMA_VERSION};
use racetrace::capture::read_all;
use racetrace::detect::{write_injection_evidence, write_report};
use racetrace::locate::{locate, LocationFinding, PathTrace, PrefixTable};
use racetrace::mitigate::{
    evaluate, EvaluationSummary, LabelFile, MitigationMode, MitigationParams, MitigationVerdict,
};
use racetrace::synth::{generate, ScenarioSpec};
use racetrace::{detect, ExecutionMode, FlowKey, PipelineConfig, Timestamp};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "racetrace", version, about = "Detect, analyze and localize TCP packet-race injections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find packet races in a capture and analyze them.
    Detect(DetectArgs),
    /// Estimate where the forged packets of a findings report came from.
    Locate(LocateArgs),
    /// Replay a labeled capture through client-side mitigation.
    Mitigate(MitigateArgs),
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
    /// Summarize a findings report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub pcap: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Zero client addresses in evidence captures.
    #[arg(long)]
    pub anonymize: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_interval_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    pub findings: PathBuf,
    /// Hop list from the client toward the server: `index<TAB>ip` or `index<TAB>*`.
    #[arg(long)]
    pub path: PathBuf,
    /// Prefix table: `prefix/len asn` per line.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MitigateArgs {
    pub pcap: PathBuf,
    /// Defaults to `<pcap stem>.labels.json` next to the capture.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "improved")]
    pub mode: MitigationMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "corpus")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub findings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input data.
    Input(String),
    /// Invalid configuration, spec or labels.
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub racetrace: String,
    pub cli: String,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub versions: Versions,
}

impl RunManifest {
    fn new(subcommand: &str, inputs: Vec<PathBuf>, config: Option<PathBuf>, out_dir: &Path, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            inputs,
            config,
            out_dir: out_dir.to_owned(),
            seed,
            versions: Versions {
                racetrace: racetrace::capture::DETECTOR_VERSION.into(),
                cli: env!("CARGO_PKG_VERSION").into(),
                schema_version: SCHEMA_VERSION,
            },
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(input)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Detect(a) => cmd_detect(&a),
        Command::Locate(a) => cmd_locate(&a),
        Command::Mitigate(a) => cmd_mitigate(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn pipeline_config(a: &DetectArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p).map_err(config)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(ms) = a.max_interval_ms {
        cfg.max_interval_ms = ms;
    }
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

pub fn cmd_detect(a: &DetectArgs) -> Result<(), CliError> {
    let cfg = pipeline_config(a)?;
    let (packets, _) = read_all(&a.pcap).map_err(input)?;
    let mut detection = detect(packets, &cfg, ExecutionMode::Threaded).map_err(config)?;
    out_dir(&a.out)?;
    write_injection_evidence(&a.out, &mut detection, a.anonymize).map_err(input)?;
    write_report(&a.out, &detection.report).map_err(input)?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &RunManifest::new("detect", vec![a.pcap.clone()], a.config.clone(), &a.out, None),
    )?;
    let injections = detection.report.injections().count();
    println!("{} races, {} injection findings", detection.report.findings.len(), injections);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedFinding {
    pub flow: FlowKey,
    pub ts: Timestamp,
    pub forged_index: u64,
    pub location: LocationFinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    pub schema_version: u32,
    pub located: Vec<LocatedFinding>,
    /// Injection findings whose forged packet could not be identified.
    pub skipped_undetermined: usize,
}

pub fn cmd_locate(a: &LocateArgs) -> Result<(), CliError> {
    let report: FindingsReport = read_json(&a.findings)?;
    let path = PathTrace::load(&a.path).map_err(input)?;
    let table = PrefixTable::load(&a.table).map_err(input)?;
    let mut located = Vec::new();
    let mut skipped = 0;
    for f in report.injections() {
        match f.forged() {
            Some(p) => located.push(LocatedFinding {
                flow: f.flow,
                ts: f.ts,
                forged_index: p.index,
                location: locate(p.ip_ttl, &path, &table),
            }),
            None => skipped += 1,
        }
    }
    located.sort_by_key(|l| (l.flow, l.ts, l.forged_index));
    out_dir(&a.out)?;
    write_json(
        &a.out.join("location.json"),
        &LocationReport { schema_version: SCHEMA_VERSION, located, skipped_undetermined: skipped },
    )?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &RunManifest::new("locate", vec![a.findings.clone(), a.path.clone(), a.table.clone()], None, &a.out, None),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictFile {
    pub schema_version: u32,
    pub verdicts: Vec<MitigationVerdict>,
}

pub fn default_labels_path(pcap: &Path) -> PathBuf {
    let stem = pcap.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    pcap.with_file_name(format!("{stem}.labels.json"))
}

pub fn cmd_mitigate(a: &MitigateArgs) -> Result<(), CliError> {
    let labels_path = a.labels.clone().unwrap_or_else(|| default_labels_path(&a.pcap));
    let (packets, _) = read_all(&a.pcap).map_err(input)?;
    let labels =
        if labels_path.exists() { LabelFile::load(&labels_path).map_err(config)? } else { LabelFile::default() };
    let eval = evaluate(&packets, &labels, a.mode, MitigationParams::default()).map_err(config)?;
    out_dir(&a.out)?;
    write_json(&a.out.join("evaluation.json"), &eval.summary)?;
    write_json(&a.out.join("verdicts.json"), &VerdictFile { schema_version: SCHEMA_VERSION, verdicts: eval.verdicts })?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &RunManifest::new("mitigate", vec![a.pcap.clone(), labels_path], None, &a.out, None),
    )?;
    print_summary(&eval.summary);
    Ok(())
}

fn print_summary(s: &EvaluationSummary) {
    println!(
        "{:?}: fn_rate {:.4} ({} of {}), mean delay {:.2} ms, {} blocked, {} delayed",
        s.mode, s.fn_rate, s.fn_count, s.injected_total, s.mean_delay_ms, s.blocks, s.delays
    );
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut spec = ScenarioSpec::load(&a.spec).map_err(config)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let corpus = generate(&spec);
    out_dir(&a.out)?;
    let paths = corpus.write(&a.out, &a.stem).map_err(input)?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &RunManifest::new("synth", vec![a.spec.clone()], Some(a.spec.clone()), &a.out, Some(spec.seed)),
    )?;
    println!(
        "{} packets, {} sessions ({} injected) -> {}",
        corpus.packets.len(),
        corpus.truth.sessions.len(),
        corpus.injections().count(),
        paths.pcap.display()
    );
    Ok(())
}

/// Plain-text summary of a findings report.
pub fn render_summary(report: &FindingsReport) -> String {
    let mut s = String::new();
    let injections: Vec<_> = report.injections().collect();
    let _ = writeln!(s, "races: {}", report.findings.len());
    let _ = writeln!(s, "injection findings: {}", injections.len());
    let mut benign: std::collections::BTreeMap<String, usize> = Default::default();
    for f in report.findings.iter().filter(|f| !f.injection) {
        *benign
            .entry(serde_json::to_string(&f.benign_tag).unwrap_or_default().trim_matches('"').to_string())
            .or_default() += 1;
    }
    for (tag, n) in &benign {
        let _ = writeln!(s, "  benign {tag}: {n}");
    }
    match report.timing.forged_win_fraction {
        Some(w) => {
            let _ = writeln!(
                s,
                "forged packet arrived first: {:.1}% of {} timed events",
                w * 100.0,
                report.timing.deltas_ms.len()
            );
        }
        None => {
            let _ = writeln!(s, "no timed events");
        }
    }
    let _ = writeln!(s, "groups: {}", report.groups.len());
    for g in &report.groups {
        let _ = writeln!(
            s,
            "  group {} [{}]: {} events, {} .. {}",
            g.group_id,
            g.payload_fingerprint,
            g.events.len(),
            g.first_seen,
            g.last_seen
        );
    }
    s
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let report: FindingsReport = read_json(&a.findings)?;
    out_dir(&a.out)?;
    let summary = render_summary(&report);
    fs::write(a.out.join("summary.txt"), &summary).map_err(input)?;
    let csv = fs::File::create(a.out.join("histogram.csv")).map_err(input)?;
    report.timing.write_csv(BufWriter::new(csv)).map_err(input)?;
    write_json(&a.out.join(MANIFEST_FILE), &RunManifest::new("report", vec![a.findings.clone()], None, &a.out, None))?;
    print!("{summary}");
    Ok(())
}
