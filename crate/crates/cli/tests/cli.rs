use std::path::{Path, PathBuf};
use std::process::Command;

use racetrace::analyze::FindingsReport;
use racetrace::capture::write_pcap;
use racetrace::mitigate::EvaluationSummary;
use racetrace::synth::Confounder;
use racetrace::{generate, PacketRecord, ScenarioSpec};
use racetrace_cli::{LocationReport, RunManifest, MANIFEST_FILE};
use serde_json::Value;

fn racetrace(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_racetrace")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read<T: serde::de::DeserializeOwned>(p: PathBuf) -> T {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn synth(dir: &Path, spec: &ScenarioSpec) -> PathBuf {
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(spec).unwrap()).unwrap();
    let out = dir.join("corpus");
    let (code, _) = racetrace(&["synth", s(&spec_path), "--out", s(&out)]);
    assert_eq!(code, 0);
    out.join("corpus.pcap")
}

fn spec(seed: u64, sessions: usize, fraction: f64) -> ScenarioSpec {
    ScenarioSpec { seed, session_count: sessions, injection_fraction: fraction, ..ScenarioSpec::default() }
}

#[test]
fn empty_capture_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = dir.path().join("empty.pcap");
    write_pcap(&pcap, std::iter::empty::<&PacketRecord>()).unwrap();
    let out = dir.path().join("out");
    assert_eq!(racetrace(&["detect", s(&pcap), "--out", s(&out)]).0, 0);
    let report: FindingsReport = read(out.join("findings.json"));
    assert!(report.findings.is_empty() && report.groups.is_empty());
    let manifest: RunManifest = read(out.join(MANIFEST_FILE));
    assert_eq!(manifest.subcommand, "detect");
}

#[test]
fn findings_match_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = synth(dir.path(), &spec(31, 120, 0.25));
    let out = dir.path().join("det");
    assert_eq!(racetrace(&["detect", s(&pcap), "--out", s(&out), "--anonymize", "--workers", "3"]).0, 0);
    let report: FindingsReport = read(out.join("findings.json"));
    assert_eq!(report.injections().count(), 30);
    for f in report.injections() {
        let ev = out.join(f.evidence.as_deref().unwrap());
        assert!(ev.exists());
        let sidecar: Value = read(ev.with_extension("json"));
        assert_eq!(sidecar["anonymized"], Value::Bool(true));
    }
    assert!(out.join("timing.csv").exists());
}

#[test]
fn benign_confounders_are_not_injections() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = synth(
        dir.path(),
        &ScenarioSpec { benign_confounders: Confounder::ALL.into_iter().collect(), ..spec(32, 50, 0.0) },
    );
    let out = dir.path().join("det");
    assert_eq!(racetrace(&["detect", s(&pcap), "--out", s(&out)]).0, 0);
    let report: FindingsReport = read(out.join("findings.json"));
    assert_eq!(report.findings.len(), 50);
    assert_eq!(report.injections().count(), 0);
    assert!(!out.join("evidence").exists());
}

#[test]
fn detect_rejects_bad_config_and_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"workers": 0}"#).unwrap();
    let pcap = synth(dir.path(), &spec(1, 5, 0.0));
    let out = dir.path().join("x");
    assert_eq!(racetrace(&["detect", s(&pcap), "--config", s(&cfg), "--out", s(&out)]).0, 3);
    std::fs::write(&cfg, r#"{"wrokers": 2}"#).unwrap();
    assert_eq!(racetrace(&["detect", s(&pcap), "--config", s(&cfg), "--out", s(&out)]).0, 3);
    assert_eq!(racetrace(&["detect", s(&pcap), "--max-interval-ms", "0", "--out", s(&out)]).0, 3);
    let junk = dir.path().join("junk.pcap");
    std::fs::write(&junk, b"not a capture at all").unwrap();
    assert_eq!(racetrace(&["detect", s(&junk), "--out", s(&out)]).0, 2);
    assert_eq!(racetrace(&["detect", s(&dir.path().join("missing.pcap")), "--out", s(&out)]).0, 2);
}

fn path_and_table(dir: &Path) -> (PathBuf, PathBuf) {
    let path = dir.join("path.txt");
    let mut text = String::from("1\t192.168.1.1\n2\t*\n");
    for i in 3..=12 {
        text.push_str(&format!("{i}\t202.97.{i}.1\n"));
    }
    std::fs::write(&path, text).unwrap();
    let table = dir.join("table.txt");
    std::fs::write(&table, "202.97.0.0/16 AS4134\n202.97.3.0/24 64500\n").unwrap();
    (path, table)
}

#[test]
fn locate_reports_hop_and_asn() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = synth(dir.path(), &spec(33, 200, 0.5));
    let det = dir.path().join("det");
    assert_eq!(racetrace(&["detect", s(&pcap), "--out", s(&det)]).0, 0);
    let (path, table) = path_and_table(dir.path());
    let out = dir.path().join("loc");
    let findings = det.join("findings.json");
    assert_eq!(racetrace(&["locate", s(&findings), "--path", s(&path), "--table", s(&table), "--out", s(&out)]).0, 0);
    let loc: LocationReport = read(out.join("location.json"));
    assert_eq!(loc.located.len(), 100);
    for l in &loc.located {
        let hops = 64 - l.location.observed_ttl;
        assert_eq!(l.location.estimated_hops, Some(hops));
        match hops {
            3 => assert_eq!(l.location.suspected_asn, Some(64500)),
            4..=12 => {
                assert_eq!(l.location.suspected_hop_ip, Some(format!("202.97.{hops}.1").parse().unwrap()));
                assert_eq!(l.location.suspected_asn, Some(4134));
            }
            _ => assert!(l.location.suspected_asn.is_none()),
        }
    }

    let rewrite = |ttl: u8, name: &str| {
        let mut report: Value = read(findings.clone());
        for f in report["findings"].as_array_mut().unwrap() {
            for side in ["first", "second"] {
                f[side]["ip_ttl"] = Value::from(ttl);
            }
        }
        let p = dir.path().join(name);
        std::fs::write(&p, serde_json::to_string(&report).unwrap()).unwrap();
        p
    };
    let ttl57 = rewrite(57, "ttl57.json");
    assert_eq!(racetrace(&["locate", s(&ttl57), "--path", s(&path), "--table", s(&table), "--out", s(&out)]).0, 0);
    let loc: LocationReport = read(out.join("location.json"));
    assert!(!loc.located.is_empty());
    for l in &loc.located {
        assert_eq!(l.location.estimated_hops, Some(7));
        assert_eq!(l.location.suspected_hop_ip, Some("202.97.7.1".parse().unwrap()));
        assert_eq!(l.location.suspected_asn, Some(4134));
    }

    // an implausible TTL on the forged packet
    let odd = rewrite(31, "odd.json");
    assert_eq!(racetrace(&["locate", s(&odd), "--path", s(&path), "--table", s(&table), "--out", s(&out)]).0, 0);
    let loc: LocationReport = read(out.join("location.json"));
    assert!(loc.located.iter().all(|l| l.location.suspected_asn.is_none()
        && l.location.caveats.contains(&racetrace::locate::Caveat::NondefaultInitialTtl)));

    let missing = dir.path().join("missing.txt");
    assert_eq!(racetrace(&["locate", s(&findings), "--path", s(&path), "--table", s(&missing), "--out", s(&out)]).0, 2);
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "202.97.0.0/33 4134\n").unwrap();
    assert_eq!(racetrace(&["locate", s(&findings), "--path", s(&path), "--table", s(&bad), "--out", s(&out)]).0, 2);
}

#[test]
fn mitigate_modes() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = synth(dir.path(), &ScenarioSpec { forged_first_fraction: 1.0, ..spec(34, 80, 0.5) });
    let imp = dir.path().join("imp");
    assert_eq!(racetrace(&["mitigate", s(&pcap), "--mode", "improved", "--out", s(&imp)]).0, 0);
    let e: EvaluationSummary = read(imp.join("evaluation.json"));
    assert_eq!((e.fn_rate, e.injected_total), (0.0, 40));
    let naive = dir.path().join("naive");
    assert_eq!(racetrace(&["mitigate", s(&pcap), "--mode", "naive", "--out", s(&naive)]).0, 0);
    let e: EvaluationSummary = read(naive.join("evaluation.json"));
    assert_eq!(e.fn_rate, 0.0);
    assert!((e.mean_delay_ms - 200.0).abs() < 1e-9, "{}", e.mean_delay_ms);

    let bdir = dir.path().join("b");
    std::fs::create_dir_all(&bdir).unwrap();
    let benign = synth(&bdir, &spec(35, 40, 0.0));
    let out = dir.path().join("bimp");
    assert_eq!(racetrace(&["mitigate", s(&benign), "--out", s(&out)]).0, 0);
    let e: EvaluationSummary = read(out.join("evaluation.json"));
    assert_eq!((e.blocks, e.delays, e.mean_delay_ms), (0, 0, 0.0));

    let unlabeled = dir.path().join("unlabeled.pcap");
    std::fs::copy(&pcap, &unlabeled).unwrap();
    assert_eq!(racetrace(&["mitigate", s(&unlabeled), "--out", s(&out)]).0, 3);
    assert_eq!(racetrace(&["mitigate", s(&pcap), "--mode", "sometimes", "--out", s(&out)]).0, 2);
}

#[test]
fn synth_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, r#"{"seed": 7, "session_count": 100, "injection_fraction": 0.2}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(racetrace(&["synth", s(&spec_path), "--out", s(&a)]).0, 0);
    assert_eq!(racetrace(&["synth", s(&spec_path), "--out", s(&b)]).0, 0);
    for f in ["corpus.pcap", "corpus.labels.json", "corpus.truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let corpus = generate(&spec(7, 100, 0.2));
    assert_eq!(corpus.injections().count(), 20);
    let manifest: RunManifest = read(a.join(MANIFEST_FILE));
    assert_eq!(manifest.seed, Some(7));
    let c = dir.path().join("c");
    assert_eq!(racetrace(&["synth", s(&spec_path), "--seed", "8", "--out", s(&c)]).0, 0);
    assert_ne!(std::fs::read(a.join("corpus.pcap")).unwrap(), std::fs::read(c.join("corpus.pcap")).unwrap());

    std::fs::write(&spec_path, r#"{"forged_first_fraction": -0.1}"#).unwrap();
    assert_eq!(racetrace(&["synth", s(&spec_path), "--out", s(&c)]).0, 3);
    std::fs::write(&spec_path, r#"{"forged_id_mode": "psychic"}"#).unwrap();
    assert_eq!(racetrace(&["synth", s(&spec_path), "--out", s(&c)]).0, 3);
}

#[test]
fn report_histogram_and_groups() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = synth(dir.path(), &spec(36, 150, 0.4));
    let det = dir.path().join("det");
    assert_eq!(racetrace(&["detect", s(&pcap), "--out", s(&det)]).0, 0);
    let out = dir.path().join("rep");
    let (code, stdout) = racetrace(&["report", s(&det.join("findings.json")), "--out", s(&out)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("injection findings: 60"));
    let report: FindingsReport = read(det.join("findings.json"));
    let csv = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    let total: usize = csv.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, report.timing.deltas_ms.len());
    assert_eq!(total, 60);
    let mut grouped: Vec<_> =
        report.groups.iter().flat_map(|g| g.events.iter().map(|e| (e.first_index, e.second_index))).collect();
    grouped.sort();
    let mut injections: Vec<_> = report.injections().map(|f| (f.first.index, f.second.index)).collect();
    injections.sort();
    assert_eq!(grouped, injections);
    assert!(out.join("summary.txt").exists() && out.join(MANIFEST_FILE).exists());
    assert_eq!(racetrace(&["report", s(&dir.path().join("nope.json")), "--out", s(&out)]).0, 2);
}
