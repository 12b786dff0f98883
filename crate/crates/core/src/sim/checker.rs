//! Offline safety checking over a run's trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::engine::{SuspicionEvent, TraceRecord};
use crate::ids::{ClientId, ReplicaId, SeqNum};

/// What one replica delivered at one seq.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub request: Digest,
    pub nd: Digest,
    pub result: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Two correct replicas delivered different data at one seq.
    Divergence { seq: SeqNum, a: ReplicaId, b: ReplicaId },
    /// A correct replica skipped or reordered a seq.
    Gap { replica: ReplicaId, expected: SeqNum, got: SeqNum },
    /// A correct replica delivered one request at two seqs.
    Duplicate { replica: ReplicaId, client: ClientId, request_id: u64 },
    /// A client accepted a result no correct replica produced.
    WrongResult { client: ClientId, request_id: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub deliveries: BTreeMap<SeqNum, BTreeMap<ReplicaId, Delivery>>,
    pub violations: Vec<Violation>,
    pub suspicions: Vec<SuspicionEvent>,
    /// Seqs each faulty replica tampered with.
    pub faults: BTreeMap<ReplicaId, BTreeSet<SeqNum>>,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    /// Suspicions raised by `replica`.
    pub fn suspicions_by(&self, replica: ReplicaId) -> impl Iterator<Item = &SuspicionEvent> {
        self.suspicions.iter().filter(move |s| s.replica == replica)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("trace does not start with a header")]
    MissingHeader,
    #[error("trace is truncated: no end record")]
    Truncated,
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Parses a JSON-lines trace and checks it.
pub fn check_safety_jsonl(text: &str) -> Result<SafetyReport, CheckError> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CheckError::Malformed { line: i + 1, message: e.to_string() }))
        .collect::<Result<Vec<TraceRecord>, _>>()?;
    check_safety(&records)
}

/// Compares every pair of correct replicas per seq and checks in-order
/// delivery, at-most-once execution, and client results.
pub fn check_safety(records: &[TraceRecord]) -> Result<SafetyReport, CheckError> {
    let Some(TraceRecord::Header { faulty, .. }) = records.first() else { return Err(CheckError::MissingHeader) };
    if !matches!(records.last(), Some(TraceRecord::End { .. })) {
        return Err(CheckError::Truncated);
    }
    let faulty: BTreeSet<ReplicaId> = faulty.iter().copied().collect();
    let mut report = SafetyReport::default();
    let mut next: BTreeMap<ReplicaId, SeqNum> = BTreeMap::new();
    let mut seen: BTreeMap<ReplicaId, BTreeSet<(ClientId, u64)>> = BTreeMap::new();
    let mut correct_results: BTreeMap<(ClientId, u64), BTreeSet<Digest>> = BTreeMap::new();
    let mut accepted = Vec::new();
    for rec in &records[1..] {
        match rec {
            TraceRecord::Delivered { replica, seq, client, request_id, null, request, nd, result, .. } => {
                let d = Delivery { request: *request, nd: *nd, result: *result };
                report.deliveries.entry(*seq).or_default().insert(*replica, d);
                if faulty.contains(replica) {
                    continue;
                }
                let expected = next.entry(*replica).or_insert(SeqNum(1));
                if *seq != *expected {
                    report.violations.push(Violation::Gap { replica: *replica, expected: *expected, got: *seq });
                }
                *expected = seq.next();
                if !null {
                    if !seen.entry(*replica).or_default().insert((*client, *request_id)) {
                        report.violations.push(Violation::Duplicate { replica: *replica, client: *client, request_id: *request_id });
                    }
                    correct_results.entry((*client, *request_id)).or_default().insert(*result);
                }
            }
            TraceRecord::Suspect { replica, seq, reason, detail, .. } => {
                report.suspicions.push(SuspicionEvent { replica: *replica, seq: *seq, reason: *reason, detail: detail.clone() });
            }
            TraceRecord::Fault { replica, seq, .. } => {
                report.faults.entry(*replica).or_default().insert(*seq);
            }
            TraceRecord::ClientAccept { client, request_id, result, .. } => accepted.push((*client, *request_id, *result)),
            _ => {}
        }
    }
    for (seq, by_replica) in &report.deliveries {
        let mut correct = by_replica.iter().filter(|(r, _)| !faulty.contains(r));
        if let Some((a, first)) = correct.next() {
            for (b, other) in correct {
                if other != first {
                    report.violations.push(Violation::Divergence { seq: *seq, a: *a, b: *b });
                }
            }
        }
    }
    for (client, request_id, result) in accepted {
        if !correct_results.get(&(client, request_id)).is_some_and(|set| set.contains(&result)) {
            report.violations.push(Violation::WrongResult { client, request_id });
        }
    }
    Ok(report)
}
