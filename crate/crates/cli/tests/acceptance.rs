//! Acceptance criteria, one PASS/FAIL line each.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racetrace::analyze::{Finding, FindingsReport, MimicryFlag, Pick};
use racetrace::locate::{estimate_hops, Prefix, PrefixTable};
use racetrace::mitigate::{evaluate, Action, MitigationMode, MitigationParams};
use racetrace::packet::endpoint;
use racetrace::synth::{Confounder, FieldNoise, IdMode, LabeledCorpus, TtlMode};
use racetrace::{
    brute_force_oracle, detect, generate, run_pipeline, DetectorParams, ExecutionMode, FlowKey, PacketRecord,
    PipelineConfig, ScenarioSpec, TcpFlags, Timestamp,
};
use racetrace_cli::{run, Cli, Command, DetectArgs};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn corpus(seed: u64, sessions: usize, fraction: f64) -> ScenarioSpec {
    ScenarioSpec { seed, session_count: sessions, injection_fraction: fraction, ..ScenarioSpec::default() }
}

fn all_confounders() -> BTreeSet<Confounder> {
    Confounder::ALL.into_iter().collect()
}

fn analyzed(c: &LabeledCorpus) -> FindingsReport {
    detect(c.packets.clone(), &PipelineConfig::default(), ExecutionMode::Threaded).expect("valid config").report
}

fn by_flow(report: &FindingsReport) -> HashMap<FlowKey, Vec<&Finding>> {
    let mut m: HashMap<FlowKey, Vec<&Finding>> = HashMap::new();
    for f in &report.findings {
        m.entry(f.flow).or_default().push(f);
    }
    m
}

fn forged_pick(f: &Finding, forged_index: u64) -> Pick {
    if f.first.index == forged_index {
        Pick::First
    } else if f.second.index == forged_index {
        Pick::Second
    } else {
        Pick::Undetermined
    }
}

fn oracle_equivalence() -> Outcome {
    let spec = ScenarioSpec { benign_confounders: all_confounders(), ..corpus(101, 600, 0.4) };
    let c = generate(&spec);
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let incremental = run_pipeline(c.packets.clone(), &cfg, ExecutionMode::Threaded).expect("valid config");
    let oracle = brute_force_oracle(&c.packets, &DetectorParams::default());
    let elapsed = start.elapsed();
    let a: BTreeSet<_> = incremental.events.iter().map(|e| e.id()).collect();
    let b: BTreeSet<_> = oracle.iter().map(|e| e.id()).collect();
    let same = a == b && incremental.events.len() == oracle.len();
    outcome(
        same && elapsed < Duration::from_secs(30) && c.truth.sessions.len() >= 500,
        format!(
            "{} sessions, {} incremental vs {} oracle events, {:.2?}",
            c.truth.sessions.len(),
            a.len(),
            b.len(),
            elapsed
        ),
    )
}

fn window_boundary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let server = endpoint([93, 184, 216, 34], 80);
    let client = endpoint([10, 1, 2, 3], 50000);
    let params = DetectorParams::default();
    let window = params.max_interval.as_micros() as i64;
    let mut failures = 0;
    for _ in 0..100 {
        let base: u32 = rng.gen();
        let len_a = rng.gen_range(1..1460usize);
        let start = rng.gen_range(0..len_a);
        let len_b = rng.gen_range(1..1460usize);
        let a_bytes: Vec<u8> = (0..len_a).map(|_| rng.gen()).collect();
        let b_bytes: Vec<u8> =
            (0..len_b).map(|k| if start + k < len_a { a_bytes[start + k] ^ 0xff } else { rng.gen() }).collect();
        let t0 = Timestamp::from_parts(1_420_070_400, 0).offset_micros(rng.gen_range(0..1_000_000));
        let pkt = |index: u64, ts: Timestamp, seq: u32, payload: &[u8]| {
            PacketRecord::tcp(ts, server, client, seq, 1, TcpFlags::PSH | TcpFlags::ACK, payload.to_vec())
                .with_index(index)
        };
        let a = pkt(0, t0, base, &a_bytes);
        let b_seq = base.wrapping_add(start as u32);
        for (dt, expected) in [(window - 1, true), (window + 1, false)] {
            let b = pkt(1, t0.offset_micros(dt), b_seq, &b_bytes);
            let pair = vec![a.clone(), b];
            let inc = run_pipeline(pair.clone(), &PipelineConfig::default(), ExecutionMode::Sequential)
                .expect("valid config");
            let orc = brute_force_oracle(&pair, &params);
            if (inc.events.len() == 1) != expected
                || (orc.len() == 1) != expected
                || inc.events.len() > 1
                || orc.len() > 1
            {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("100 geometries, {failures} mismatches at 200 ms -/+ 1 us"))
}

fn rule_accuracy(c: &LabeledCorpus) -> (usize, usize, usize) {
    let report = analyzed(c);
    let flows = by_flow(&report);
    let (mut id_ok, mut ttl_ok, mut total) = (0, 0, 0);
    for t in &c.truth.sessions {
        let Some(inj) = &t.injection else { continue };
        total += 1;
        let Some(f) = flows
            .get(&t.flow)
            .and_then(|v| v.iter().find(|f| f.first.index == inj.forged_index || f.second.index == inj.forged_index))
        else {
            continue;
        };
        let truth = forged_pick(f, inj.forged_index);
        id_ok += usize::from(f.verdicts.by_id_rule == truth);
        ttl_ok += usize::from(f.verdicts.by_ttl_rule == truth);
    }
    (id_ok, ttl_ok, total)
}

fn classifier() -> Outcome {
    let clean = generate(&corpus(303, 400, 1.0));
    let (id_a, ttl_a, n_a) = rule_accuracy(&clean);
    let noisy = generate(&ScenarioSpec { field_noise: Some(FieldNoise::default()), ..corpus(304, 1000, 1.0) });
    let (id_n, ttl_n, n_n) = rule_accuracy(&noisy);
    let pct = |k: usize, n: usize| 100.0 * k as f64 / n as f64;
    let pass = n_a >= 300 && id_a == n_a && ttl_a == n_a && pct(id_n, n_n) >= 90.0 && pct(ttl_n, n_n) >= 87.0;
    outcome(
        pass,
        format!(
            "anomalous: id {id_a}/{n_a}, ttl {ttl_a}/{n_a}; field noise: id {:.1}%, ttl {:.1}% of {n_n}",
            pct(id_n, n_n),
            pct(ttl_n, n_n)
        ),
    )
}

fn mimicry() -> Outcome {
    let mut mismatches = 0;
    let mut checked = 0;
    let modes = [
        (IdMode::DupServer, Some(MimicryFlag::DupServerId)),
        (IdMode::DupClient, Some(MimicryFlag::DupClientId)),
        (IdMode::ByteswapClient, Some(MimicryFlag::ByteswapClientId)),
        (IdMode::Random, None),
    ];
    for (k, (mode, flag)) in modes.into_iter().enumerate() {
        let spec = ScenarioSpec {
            forged_id_mode: mode,
            benign_confounders: all_confounders(),
            ..corpus(400 + k as u64, 200, 0.5)
        };
        let c = generate(&spec);
        let report = analyzed(&c);
        let flows = by_flow(&report);
        for t in &c.truth.sessions {
            let raised: BTreeSet<MimicryFlag> = flows
                .get(&t.flow)
                .into_iter()
                .flatten()
                .flat_map(|f| f.mimicry_flags.first.iter().chain(&f.mimicry_flags.second).copied())
                .collect();
            let expected: BTreeSet<MimicryFlag> = t.injection.as_ref().and(flag).into_iter().collect();
            checked += 1;
            mismatches += usize::from(raised != expected);
        }
    }
    let benign = generate(&ScenarioSpec { benign_confounders: all_confounders(), ..corpus(410, 300, 0.0) });
    let report = analyzed(&benign);
    let false_flags = report.findings.iter().filter(|f| f.mimicry_flags.any()).count();
    outcome(
        mismatches == 0 && false_flags == 0,
        format!("{checked} sessions over 4 id modes, {mismatches} mismatches; benign corpus {} races, {false_flags} flagged", report.findings.len()),
    )
}

fn timing() -> Outcome {
    let c = generate(&ScenarioSpec { forged_first_fraction: 0.68, ..corpus(505, 1000, 1.0) });
    let report = analyzed(&c);
    let n = report.timing.deltas_ms.len();
    let w = report.timing.forged_win_fraction.unwrap_or(f64::NAN);
    outcome(n == 1000 && (w - 0.68).abs() <= 0.04, format!("forged-win fraction {w:.3} over {n} injections"))
}

/// Hand-derived: valid estimates are TTL 2..=29 (from 32), 34..=61 (from 64),
/// 98..=125 (from 128) and 225..=252 (from 255).
fn ttl_oracle(ttl: u8) -> Option<(u8, u8)> {
    match ttl {
        2..=29 => Some((32, 32 - ttl)),
        34..=61 => Some((64, 64 - ttl)),
        98..=125 => Some((128, 128 - ttl)),
        225..=252 => Some((255, 255 - ttl)),
        _ => None,
    }
}

fn locator() -> Outcome {
    let worked = estimate_hops(57).map(|e| (e.initial_ttl, e.hops)) == Some((64, 7));
    let table_ok = (0..=255u8).all(|t| estimate_hops(t).map(|e| (e.initial_ttl, e.hops)) == ttl_oracle(t));
    let bounds = estimate_hops(61).map(|e| e.hops) == Some(3)
        && estimate_hops(62).is_none()
        && estimate_hops(34).map(|e| e.hops) == Some(30)
        && estimate_hops(33).is_none();

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut table = PrefixTable::new();
    let mut linear: Vec<(Prefix, u32)> = Vec::new();
    let roots: Vec<u32> = (0..16).map(|_| rng.gen::<u32>()).collect();
    let mut seen = std::collections::HashSet::new();
    while linear.len() < 100_000 {
        let root = roots[rng.gen_range(0..roots.len())];
        let addr = Ipv4Addr::from(root ^ (rng.gen::<u32>() >> rng.gen_range(6..32)));
        let p = Prefix::new(addr, rng.gen_range(0..=32));
        let asn = rng.gen_range(1..400_000);
        table.insert(p, asn);
        if seen.insert(p) {
            linear.push((p, asn));
        }
    }
    let mut mismatches = 0;
    let queries = 1000;
    for _ in 0..queries {
        let root = roots[rng.gen_range(0..roots.len())];
        let ip = Ipv4Addr::from(root ^ (rng.gen::<u32>() >> rng.gen_range(4..32)));
        let expected = linear.iter().filter(|(p, _)| p.contains(ip)).max_by_key(|(p, _)| p.len).copied();
        mismatches += usize::from(table.longest_match(ip) != expected);
    }
    outcome(
        worked && table_ok && bounds && mismatches == 0,
        format!(
            "ttl 57 -> 7 hops: {worked}; 256-entry table: {table_ok}; 3/30 bounds: {bounds}; {} prefixes, {mismatches}/{queries} lookup mismatches",
            linear.len()
        ),
    )
}

fn mitigation() -> Outcome {
    let params = MitigationParams::default();
    let forged_first = generate(&ScenarioSpec { forged_first_fraction: 1.0, ..corpus(707, 300, 0.5) });
    let imp = evaluate(&forged_first.packets, &forged_first.labels, MitigationMode::Improved, params).expect("labeled");
    let naive = evaluate(&forged_first.packets, &forged_first.labels, MitigationMode::Naive, params).expect("labeled");

    let benign = generate(&corpus(708, 200, 0.0));
    let imp_b = evaluate(&benign.packets, &benign.labels, MitigationMode::Improved, params).expect("labeled");
    let naive_b = evaluate(&benign.packets, &benign.labels, MitigationMode::Naive, params).expect("labeled");
    let naive_min_delay =
        naive_b.verdicts.iter().filter(|v| v.action != Action::Block).map(|v| v.delay_incurred_us).min().unwrap_or(0);

    let aligned = generate(&ScenarioSpec {
        forged_first_fraction: 1.0,
        forged_ttl_mode: TtlMode::Aligned,
        forged_id_mode: IdMode::Aligned,
        ..corpus(709, 300, 0.5)
    });
    let imp_adv = evaluate(&aligned.packets, &aligned.labels, MitigationMode::Improved, params).expect("labeled");

    let pass = imp.summary.fn_count == 0
        && naive.summary.fn_count == 0
        && imp.summary.injected_total > 0
        && imp_b.summary.mean_delay_ms == 0.0
        && imp_b.summary.delays == 0
        && imp_b.summary.blocks == 0
        && naive_min_delay >= 200_000
        && imp_adv.summary.fn_count > 0;
    outcome(
        pass,
        format!(
            "forged-first: improved fn {}/{}, naive fn {}/{}; benign: improved mean delay {:.1} ms, naive min delay {:.1} ms; aligned: improved fn {}/{}",
            imp.summary.fn_count,
            imp.summary.injected_total,
            naive.summary.fn_count,
            naive.summary.injected_total,
            imp_b.summary.mean_delay_ms,
            naive_min_delay as f64 / 1000.0,
            imp_adv.summary.fn_count,
            imp_adv.summary.injected_total
        ),
    )
}

fn benign_filters() -> Outcome {
    let c = generate(&ScenarioSpec { benign_confounders: all_confounders(), ..corpus(808, 250, 0.0) });
    let report = analyzed(&c);
    let flows = by_flow(&report);
    let mut per: BTreeMap<Confounder, (usize, usize)> = BTreeMap::new();
    for t in &c.truth.sessions {
        let Some(conf) = t.confounder else { continue };
        let e = per.entry(conf).or_default();
        e.1 += 1;
        if flows.get(&t.flow).is_some_and(|v| !v.is_empty() && v.iter().all(|f| f.benign_tag == conf.tag())) {
            e.0 += 1;
        }
    }
    let injections = report.injections().count();
    let all_ok = per.len() == 5 && per.values().all(|(ok, n)| *n >= 50 && *ok as f64 >= 0.98 * *n as f64);
    let detail: Vec<String> = per.iter().map(|(c, (ok, n))| format!("{c:?} {ok}/{n}")).collect();
    outcome(all_ok && injections == 0, format!("{}; injection findings {injections}", detail.join(", ")))
}

fn detect_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != racetrace_cli::MANIFEST_FILE) {
                let rel = path.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).expect("readable output"));
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec =
        ScenarioSpec { benign_confounders: all_confounders(), injector_closes_with_rst: true, ..corpus(909, 400, 0.4) };
    let paths = generate(&spec).write(tmp.path(), "corpus").expect("writable");
    let mut outputs = Vec::new();
    for workers in [1usize, 4, 8] {
        let out = tmp.path().join(format!("w{workers}"));
        let args = DetectArgs {
            pcap: paths.pcap.clone(),
            config: None,
            out: out.clone(),
            anonymize: true,
            workers: Some(workers),
            max_interval_ms: None,
        };
        run(Cli { command: Command::Detect(args) }).expect("detect succeeds");
        outputs.push(detect_outputs(&out));
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    let findings = outputs[0].get("findings.json").map_or(0, Vec::len);
    outcome(
        identical && findings > 0,
        format!("{} output files per run, findings.json {findings} bytes, identical: {identical}", outputs[0].len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("race detection matches brute-force oracle", oracle_equivalence),
        ("200 ms window boundary", window_boundary),
        ("forged-packet classifier accuracy", classifier),
        ("id mimicry flags", mimicry),
        ("forged-first timing fraction", timing),
        ("injector locator", locator),
        ("mitigation false negatives and delay", mitigation),
        ("benign race filters", benign_filters),
        ("detect output independent of worker count", determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {} {}: {} ({}) [{:.2?}]",
            n + 1,
            name,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
