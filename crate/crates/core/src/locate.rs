//! Injector localization from a forged packet's TTL, a traceroute path and
//! a prefix-to-ASN table.
//!
//! The hop count is `initial - observed` with the initial TTL taken as the
//! smallest common default not below the observed value. Under a symmetric
//! route the suspected injector is the path hop at that distance from the
//! client.

use std::collections::{BTreeSet, HashMap};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TableError;

pub const DEFAULT_INITIAL_TTLS: [u8; 4] = [32, 64, 128, 255];
pub const MIN_PLAUSIBLE_HOPS: u8 = 3;
pub const MAX_PLAUSIBLE_HOPS: u8 = 30;
pub const HOP_INDEXING: &str = "hops counted from the client end of the client-to-server path, assuming route symmetry";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopEstimate {
    pub initial_ttl: u8,
    pub hops: u8,
}

/// Hop distance implied by `observed_ttl`, or `None` when it falls outside
/// the plausible 3..=30 range.
pub fn estimate_hops(observed_ttl: u8) -> Option<HopEstimate> {
    let initial_ttl = *DEFAULT_INITIAL_TTLS.iter().find(|&&d| d >= observed_ttl)?;
    let hops = initial_ttl - observed_ttl;
    (MIN_PLAUSIBLE_HOPS..=MAX_PLAUSIBLE_HOPS).contains(&hops).then_some(HopEstimate { initial_ttl, hops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub index: u8,
    /// `None` for a hop that did not answer.
    pub ip: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTrace {
    /// Address of the last hop, when it answered.
    pub destination: Option<Ipv4Addr>,
    pub hops: Vec<Hop>,
}

impl PathTrace {
    /// Parses `hop_index<TAB>ip` lines, `*` marking a silent hop. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut hops: Vec<Hop> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| TableError::Malformed { line: n + 1, reason };
            let mut cols = line.split_whitespace();
            let (Some(idx), Some(addr), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad(format!("expected 'hop_index<TAB>ip|*', got {line:?}")));
            };
            let index: u8 = idx.parse().map_err(|_| bad(format!("bad hop index {idx:?}")))?;
            let ip =
                if addr == "*" { None } else { Some(addr.parse().map_err(|_| bad(format!("bad address {addr:?}")))?) };
            if let Some(prev) = hops.last() {
                if index <= prev.index {
                    return Err(bad(format!("hop index {index} does not increase")));
                }
            } else if index == 0 {
                return Err(bad("hop indices start at 1".into()));
            }
            hops.push(Hop { index, ip });
        }
        Ok(PathTrace { destination: hops.last().and_then(|h| h.ip), hops })
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| TableError::Read { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    /// Number of hops to the destination.
    pub fn len(&self) -> u8 {
        self.hops.last().map_or(0, |h| h.index)
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn hop(&self, index: u8) -> Option<&Hop> {
        self.hops.iter().find(|h| h.index == index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prefix {
    pub network: Ipv4Addr,
    pub len: u8,
}

impl Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Self {
        Prefix { network: Ipv4Addr::from(u32::from(addr) & mask(len)), len }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & mask(self.len) == u32::from(self.network)
    }
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl std::str::FromStr for Prefix {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (addr, len) = s.split_once('/').ok_or_else(|| format!("missing '/' in {s:?}"))?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad address {addr:?}"))?;
        let len: u8 = len.parse().map_err(|_| format!("bad prefix length {len:?}"))?;
        if len > 32 {
            return Err(format!("prefix length {len} > 32"));
        }
        Ok(Prefix::new(addr, len))
    }
}

/// Longest-prefix-match table, one hash map per prefix length.
#[derive(Debug, Clone, Default)]
pub struct PrefixTable {
    by_len: Vec<HashMap<u32, u32>>,
    entries: Vec<(Prefix, u32)>,
}

impl PrefixTable {
    pub fn new() -> Self {
        PrefixTable { by_len: vec![HashMap::new(); 33], entries: Vec::new() }
    }

    /// Adds a route; the first announcement of a prefix wins.
    pub fn insert(&mut self, prefix: Prefix, asn: u32) {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        let slot = &mut self.by_len[usize::from(prefix.len)];
        if let std::collections::hash_map::Entry::Vacant(e) = slot.entry(u32::from(prefix.network)) {
            e.insert(asn);
            self.entries.push((prefix, asn));
        }
    }

    pub fn entries(&self) -> &[(Prefix, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `a.b.c.d/len<TAB>asn` lines (`AS` prefix on the number is
    /// accepted). Host bits in the address are masked off.
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut table = PrefixTable::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| TableError::Malformed { line: n + 1, reason };
            let mut cols = line.split_whitespace();
            let (Some(pfx), Some(asn), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad(format!("expected 'prefix<TAB>asn', got {line:?}")));
            };
            let prefix: Prefix = pfx.parse().map_err(bad)?;
            let digits = asn.strip_prefix("AS").or_else(|| asn.strip_prefix("as")).unwrap_or(asn);
            let asn: u32 = digits.parse().map_err(|_| bad(format!("bad asn {asn:?}")))?;
            table.insert(prefix, asn);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| TableError::Read { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn longest_match(&self, ip: Ipv4Addr) -> Option<(Prefix, u32)> {
        let addr = u32::from(ip);
        (0..self.by_len.len()).rev().find_map(|len| {
            let network = addr & mask(len as u8);
            self.by_len[len]
                .get(&network)
                .map(|&asn| (Prefix { network: Ipv4Addr::from(network), len: len as u8 }, asn))
        })
    }
}

pub fn lookup_asn(ip: Ipv4Addr, table: &PrefixTable) -> Option<u32> {
    table.longest_match(ip).map(|(_, asn)| asn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caveat {
    /// The hop estimate is outside 3..=30, so the sender likely used a
    /// non-default initial TTL.
    NondefaultInitialTtl,
    HopsOutOfBounds,
    PathShorterThanEstimate,
    AsymmetryAssumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationFinding {
    pub observed_ttl: u8,
    pub initial_ttl: Option<u8>,
    pub estimated_hops: Option<u8>,
    pub suspected_hop_ip: Option<Ipv4Addr>,
    pub suspected_prefix: Option<String>,
    pub suspected_asn: Option<u32>,
    pub caveats: BTreeSet<Caveat>,
    pub notes: Vec<String>,
    pub hop_indexing: String,
}

/// Localizes the injector of a forged packet with TTL `forged_ttl`, using a
/// client-to-server `path` and `table` for the ASN lookup.
pub fn locate(forged_ttl: u8, path: &PathTrace, table: &PrefixTable) -> LocationFinding {
    let mut finding = LocationFinding {
        observed_ttl: forged_ttl,
        initial_ttl: None,
        estimated_hops: None,
        suspected_hop_ip: None,
        suspected_prefix: None,
        suspected_asn: None,
        caveats: BTreeSet::from([Caveat::AsymmetryAssumed]),
        notes: Vec::new(),
        hop_indexing: HOP_INDEXING.into(),
    };
    let Some(est) = estimate_hops(forged_ttl) else {
        finding.caveats.insert(Caveat::NondefaultInitialTtl);
        finding
            .notes
            .push(format!("ttl {forged_ttl} implies a hop count outside {MIN_PLAUSIBLE_HOPS}..={MAX_PLAUSIBLE_HOPS}"));
        return finding;
    };
    finding.initial_ttl = Some(est.initial_ttl);
    finding.estimated_hops = Some(est.hops);
    if est.hops > path.len() {
        finding.caveats.insert(Caveat::HopsOutOfBounds);
        finding.caveats.insert(Caveat::PathShorterThanEstimate);
        finding.notes.push(format!("estimate of {} hops exceeds the {}-hop path", est.hops, path.len()));
        return finding;
    }
    if est.hops == path.len() {
        finding.notes.push("suspected hop is the destination server itself".into());
    }
    match path.hop(est.hops).and_then(|h| h.ip) {
        Some(ip) => {
            finding.suspected_hop_ip = Some(ip);
            if let Some((prefix, asn)) = table.longest_match(ip) {
                finding.suspected_prefix = Some(format!("{}/{}", prefix.network, prefix.len));
                finding.suspected_asn = Some(asn);
            } else {
                finding.notes.push(format!("no announced prefix covers {ip}"));
            }
        }
        None => finding.notes.push(format!("hop {} did not answer the traceroute", est.hops)),
    }
    finding
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-written reference: walk up the default list.
    fn reference_hops(ttl: u8) -> Option<u8> {
        let initial = if ttl <= 32 {
            32
        } else if ttl <= 64 {
            64
        } else if ttl <= 128 {
            128
        } else {
            255
        };
        let hops = initial - ttl;
        if (3..=30).contains(&hops) {
            Some(hops)
        } else {
            None
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(estimate_hops(57), Some(HopEstimate { initial_ttl: 64, hops: 7 }));
        assert_eq!(estimate_hops(31), None);
        assert_eq!(estimate_hops(100), Some(HopEstimate { initial_ttl: 128, hops: 28 }));
        for d in DEFAULT_INITIAL_TTLS {
            assert_eq!(estimate_hops(d), None);
        }
    }

    #[test]
    fn exhaustive_ttl_table() {
        for ttl in 0..=255u8 {
            let got = estimate_hops(ttl).map(|e| e.hops);
            assert_eq!(got, reference_hops(ttl), "ttl {ttl}");
            if let Some(h) = got {
                assert!((3..=30).contains(&h));
            }
        }
    }

    fn path12() -> PathTrace {
        let mut text = String::new();
        for i in 1..=12u8 {
            let ip = match i {
                7 => "202.97.33.5".to_string(),
                9 => "*".to_string(),
                _ => format!("100.64.0.{i}"),
            };
            text.push_str(&format!("{i}\t{ip}\n"));
        }
        PathTrace::parse(&text).unwrap()
    }

    fn table() -> PrefixTable {
        PrefixTable::parse("202.96.0.0/12\t4134\n202.97.0.0/16\tAS4134\n10.0.0.0/8\t64512\n").unwrap()
    }

    #[test]
    fn locates_hop_seven() {
        let f = locate(57, &path12(), &table());
        assert_eq!(f.estimated_hops, Some(7));
        assert_eq!(f.suspected_hop_ip, Some(Ipv4Addr::new(202, 97, 33, 5)));
        assert_eq!(f.suspected_asn, Some(4134));
        assert!(f.caveats.contains(&Caveat::AsymmetryAssumed));
    }

    #[test]
    fn out_of_bounds_and_unknown() {
        let f = locate(103, &path12(), &table()); // 25 hops
        assert!(f.caveats.contains(&Caveat::HopsOutOfBounds));
        assert_eq!(f.suspected_asn, None);
        let f = locate(55, &path12(), &table()); // hop 9 silent
        assert_eq!(f.suspected_hop_ip, None);
        assert_eq!(f.suspected_asn, None);
        let f = locate(60, &path12(), &table()); // hop 4, unannounced
        assert!(f.suspected_hop_ip.is_some());
        assert_eq!(f.suspected_asn, None);
        let f = locate(31, &path12(), &table());
        assert!(f.caveats.contains(&Caveat::NondefaultInitialTtl));
        assert_eq!(f.estimated_hops, None);
        let f = locate(52, &path12(), &table());
        assert!(f.notes.iter().any(|n| n.contains("destination")));
    }

    #[test]
    fn longest_prefix_semantics() {
        let t = PrefixTable::parse("10.0.0.0/8\t1\n10.1.0.0/16\t2\n").unwrap();
        assert_eq!(lookup_asn(Ipv4Addr::new(10, 1, 2, 3), &t), Some(2));
        assert_eq!(lookup_asn(Ipv4Addr::new(10, 2, 2, 3), &t), Some(1));
        assert_eq!(lookup_asn(Ipv4Addr::new(11, 0, 0, 1), &t), None);
        let t = PrefixTable::parse("0.0.0.0/0\t7\n").unwrap();
        assert_eq!(lookup_asn(Ipv4Addr::new(11, 0, 0, 1), &t), Some(7));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = PrefixTable::parse("10.0.0.0/8\t1\n\n10.0.0.0/40\t2\n").unwrap_err();
        assert!(matches!(err, TableError::Malformed { line: 3, .. }), "{err}");
        assert!(matches!(PrefixTable::parse("1.2.3.4/8 x").unwrap_err(), TableError::Malformed { line: 1, .. }));
        assert!(matches!(
            PathTrace::parse("1\t1.1.1.1\n1\t2.2.2.2\n").unwrap_err(),
            TableError::Malformed { line: 2, .. }
        ));
    }

    proptest! {
        #[test]
        fn lookup_matches_linear_scan(routes in prop::collection::vec((any::<u32>(), 0u8..=32, 1u32..70000), 1..60), probes in prop::collection::vec(any::<u32>(), 1..40)) {
            let mut t = PrefixTable::new();
            for (addr, len, asn) in &routes {
                t.insert(Prefix::new(Ipv4Addr::from(*addr), *len), *asn);
            }
            for ip in probes.iter().map(|&x| Ipv4Addr::from(x)).chain(routes.iter().map(|r| Ipv4Addr::from(r.0))) {
                let want = t.entries().iter().filter(|(p, _)| p.contains(ip)).max_by_key(|(p, _)| p.len).map(|(_, a)| *a);
                prop_assert_eq!(lookup_asn(ip, &t), want);
            }
        }
    }
}
