//! Lottery draws from collectively determined randomness. Each replica
//! contributes a share; the combined value depends on every share in the
//! decision set, so no single replica can pick the outcome.

use ndbft::app::npre_combine;
use ndbft::engine::TraceRecord;
use ndbft::ids::{QuorumConfig, ReplicaId};
use ndbft::sim::{self, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quorum = QuorumConfig::new(1);
    let shares: Vec<(ReplicaId, Vec<u8>)> = (0..3).map(|r| (ReplicaId(r), vec![r as u8; 16])).collect();
    let base = npre_combine(&shares, quorum)?;
    let mut flipped = shares.clone();
    flipped[2].1[0] ^= 1;
    println!("combined:            {}", hex(&base));
    println!("one share bit flip:  {}", hex(&npre_combine(&flipped, quorum)?));

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/fault_free_npre.toml");
    let scenario = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
    let out = sim::run(&scenario, scenario.seed)?;
    for rec in out.trace.iter().filter(|r| matches!(r, TraceRecord::PpuDecided { replica, .. } if replica.0 == 1)).take(5) {
        if let TraceRecord::PpuDecided { seq, proposers, decision, .. } = rec {
            println!("seq {:>2}: decision from {:?} -> {}", seq.0, proposers, decision.to_hex());
        }
    }
    println!("{} draws, safe {}", out.metrics.completed, out.report.is_safe());
    Ok(())
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}
