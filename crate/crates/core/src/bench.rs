//! Latency and throughput sweeps over simulated deployments.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::AppSpec;
use crate::mask::NdTypeMask;
use crate::sim::{self, KindCount, Scenario, Workload, SCENARIO_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub masks: Vec<NdTypeMask>,
    /// Bytes of nondeterministic values per class.
    pub nd_sizes: Vec<usize>,
    /// Request and reply size in bytes.
    pub req_size: usize,
    pub clients: Vec<u32>,
    /// Requests per client.
    pub iters: u32,
    pub f: u32,
    pub optimizations: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            masks: ["0", "VPRE", "NPRE", "VPOST", "NPOST"].iter().map(|m| NdTypeMask::parse(m).unwrap()).collect(),
            nd_sizes: vec![256],
            req_size: 1024,
            clients: vec![1, 8],
            iters: 1000,
            f: 1,
            optimizations: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("invalid bench configuration: {0}")]
    Invalid(String),
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Invalid(m.to_string()));
        if self.masks.is_empty() || self.nd_sizes.is_empty() || self.clients.is_empty() {
            return bad("every sweep dimension needs at least one value");
        }
        if self.req_size == 0 || self.nd_sizes.contains(&0) {
            return bad("sizes must be positive");
        }
        if self.iters == 0 || self.clients.contains(&0) {
            return bad("iterations and client counts must be at least 1");
        }
        Ok(())
    }

    /// The scenario run for one sweep point.
    pub fn scenario(&self, mask: NdTypeMask, nd_size: usize, clients: u32) -> Scenario {
        let mut s = Scenario {
            version: SCENARIO_VERSION,
            name: format!("bench mask={mask} nd={nd_size} clients={clients}"),
            f: self.f,
            seed: self.seed,
            network: Default::default(),
            costs: Default::default(),
            replica: Default::default(),
            client: Default::default(),
            app: AppSpec::for_mask(mask).with_nd_size(nd_size).with_reply_size(self.req_size),
            workload: Workload { clients, requests_per_client: self.iters, request_size: self.req_size, think_us: 0 },
            faults: Vec::new(),
            max_time_us: u64::MAX,
        };
        s.replica = s.replica.with_optimizations(self.optimizations);
        s
    }
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mask: String,
    /// Total nondeterministic bytes per request: per-class size times
    /// the number of classes in the mask.
    pub nd_size: usize,
    pub nd_size_per_class: usize,
    pub clients: u32,
    pub mean_latency_us: f64,
    pub p99_latency_us: u64,
    pub throughput_rps: f64,
    pub msgs_total: u64,
    pub bytes_total: u64,
    pub piggyback_ratio: f64,
    pub completed: u64,
    pub failed: u64,
    pub null_requests: u64,
    pub violations: usize,
    pub messages: std::collections::BTreeMap<String, KindCount>,
}

/// The CSV projection of a row.
#[derive(Serialize)]
struct CsvRow<'a> {
    mask: &'a str,
    nd_size: usize,
    clients: u32,
    mean_latency_us: f64,
    p99_latency_us: u64,
    throughput_rps: f64,
    msgs_total: u64,
    bytes_total: u64,
    piggyback_ratio: f64,
}

pub fn run_point(cfg: &BenchConfig, mask: NdTypeMask, nd_size: usize, clients: u32) -> BenchRow {
    let scenario = cfg.scenario(mask, nd_size, clients);
    let out = sim::run(&scenario, cfg.seed).expect("bench scenarios are valid");
    let m = &out.metrics;
    BenchRow {
        mask: mask.to_string(),
        nd_size: nd_size * mask.class_count() as usize,
        nd_size_per_class: nd_size,
        clients,
        mean_latency_us: round2(m.mean_latency_us()),
        p99_latency_us: m.percentile_latency_us(99.0),
        throughput_rps: round2(m.throughput_rps()),
        msgs_total: m.msgs_total(),
        bytes_total: m.bytes_total(),
        piggyback_ratio: (m.piggyback_ratio() * 1e4).round() / 1e4,
        completed: m.completed,
        failed: m.failed,
        null_requests: m.postnd.null_requests,
        violations: out.report.violations.len(),
        messages: m.messages.clone(),
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Runs every sweep point in order: masks, then sizes, then clients.
/// A deterministic mask carries no values, so it runs at one size only.
pub fn bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &mask in &cfg.masks {
        let sizes = if mask.class_count() == 0 { &cfg.nd_sizes[..1] } else { &cfg.nd_sizes[..] };
        for &nd in sizes {
            for &c in &cfg.clients {
                rows.push(run_point(cfg, mask, nd, c));
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(CsvRow {
            mask: &r.mask,
            nd_size: r.nd_size,
            clients: r.clients,
            mean_latency_us: r.mean_latency_us,
            p99_latency_us: r.p99_latency_us,
            throughput_rps: r.throughput_rps,
            msgs_total: r.msgs_total,
            bytes_total: r.bytes_total,
            piggyback_ratio: r.piggyback_ratio,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(cfg: &BenchConfig, rows: &[BenchRow]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "rows": rows })).expect("bench rows serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig { iters: 40, clients: vec![4], ..BenchConfig::default() }
    }

    #[test]
    fn closed_loop_sanity() {
        let cfg = small();
        for row in bench(&cfg).unwrap() {
            assert_eq!(row.violations, 0);
            assert_eq!(row.completed, 160);
            let concurrency = row.throughput_rps * row.mean_latency_us / 1e6;
            assert!((concurrency - 4.0).abs() <= 0.4, "{}: concurrency {concurrency}", row.mask);
        }
    }

    #[test]
    fn deterministic_mask_runs_once_per_client_count() {
        let cfg = BenchConfig { masks: vec![NdTypeMask::DETERMINISTIC, NdTypeMask::parse("VPRE").unwrap()], nd_sizes: vec![64, 128], iters: 5, clients: vec![1, 2], ..BenchConfig::default() };
        let rows = bench(&cfg).unwrap();
        assert_eq!(rows.iter().filter(|r| r.mask == "0").count(), 2);
        assert_eq!(rows.iter().filter(|r| r.mask == "VPRE").count(), 4);
    }

    #[test]
    fn composite_nd_size_is_total() {
        let cfg = BenchConfig { iters: 5, clients: vec![1], ..BenchConfig::default() };
        let row = run_point(&cfg, NdTypeMask::parse("VPRE|NPOST").unwrap(), 256, 1);
        assert_eq!(row.nd_size, 512);
        assert_eq!(row.nd_size_per_class, 256);
    }

    #[test]
    fn csv_header_is_stable() {
        let cfg = BenchConfig { iters: 3, clients: vec![1], masks: vec![NdTypeMask::DETERMINISTIC], ..BenchConfig::default() };
        let rows = bench(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "mask,nd_size,clients,mean_latency_us,p99_latency_us,throughput_rps,msgs_total,bytes_total,piggyback_ratio"
        );
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(BenchConfig { iters: 0, ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig { nd_sizes: vec![0], ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig { masks: vec![], ..BenchConfig::default() }.validate().is_err());
    }
}
