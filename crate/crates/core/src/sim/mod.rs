//! Deterministic discrete-event simulation of a full deployment.
//!
//! A run is fully determined by its [`Scenario`] and seed: virtual time
//! advances in microseconds, ties break by insertion order, and every
//! random draw comes from seeded generators.

mod byzantine;
pub mod checker;
mod net;
pub mod scenario;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{ReplicaStats, TraceRecord};

pub use checker::{check_safety, check_safety_jsonl, CheckError, Delivery, SafetyReport, Violation};
pub use net::Simulation;
pub use scenario::{Behavior, CostModel, DelayModel, FaultSpec, NetworkSpec, Scenario, ScenarioError, Trigger, Workload, SCENARIO_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCount {
    pub count: u64,
    pub bytes: u64,
}

/// Counters and samples gathered during one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Transmissions per message kind, one per destination.
    pub messages: BTreeMap<String, KindCount>,
    pub dropped: u64,
    pub latencies_us: Vec<u64>,
    pub completed: u64,
    pub failed: u64,
    pub first_invoke_us: u64,
    pub last_accept_us: u64,
    pub end_us: u64,
    pub events: u64,
    /// Post-determined dissemination counters summed over replicas.
    pub postnd: PostndCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostndCounts {
    pub piggybacked: u64,
    pub null_carried: u64,
    pub standalone: u64,
    pub null_requests: u64,
}

impl PostndCounts {
    pub(crate) fn add(&mut self, s: ReplicaStats) {
        self.piggybacked += s.piggybacked;
        self.null_carried += s.null_carried;
        self.standalone += s.standalone;
        self.null_requests += s.null_requests;
    }
}

impl Metrics {
    pub fn msgs_total(&self) -> u64 {
        self.messages.values().map(|k| k.count).sum()
    }

    pub fn bytes_total(&self) -> u64 {
        self.messages.values().map(|k| k.bytes).sum()
    }

    pub fn kind(&self, name: &str) -> KindCount {
        self.messages.get(name).copied().unwrap_or_default()
    }

    pub fn mean_latency_us(&self) -> f64 {
        if self.latencies_us.is_empty() {
            return 0.0;
        }
        self.latencies_us.iter().sum::<u64>() as f64 / self.latencies_us.len() as f64
    }

    /// Nearest-rank percentile.
    pub fn percentile_latency_us(&self, p: f64) -> u64 {
        if self.latencies_us.is_empty() {
            return 0;
        }
        let mut v = self.latencies_us.clone();
        v.sort_unstable();
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    /// Completed requests per virtual second of client activity.
    pub fn throughput_rps(&self) -> f64 {
        let span = self.last_accept_us.saturating_sub(self.first_invoke_us);
        if span == 0 {
            return 0.0;
        }
        self.completed as f64 * 1e6 / span as f64
    }

    /// Share of post-determined records that rode on a client request's
    /// pre-prepare. Zero when no records were disseminated.
    pub fn piggyback_ratio(&self) -> f64 {
        let p = self.postnd;
        let total = p.piggybacked + p.null_carried + p.standalone;
        if total == 0 {
            0.0
        } else {
            p.piggybacked as f64 / total as f64
        }
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub report: SafetyReport,
    pub metrics: Metrics,
}

impl RunOutput {
    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&r.to_json_line());
            s.push('\n');
        }
        s
    }
}

/// Runs `scenario` to quiescence with the given seed.
pub fn run(scenario: &Scenario, seed: u64) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    Ok(Simulation::new(scenario, seed).run())
}
