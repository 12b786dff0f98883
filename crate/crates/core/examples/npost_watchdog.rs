//! Two bad recorded schedules from the primary. A lock order whose replay
//! deadlocks is rejected by analysis before anything executes. One that
//! passes analysis but never finishes exhausts the execution budget, and
//! the backup restores its snapshot.

use std::collections::BTreeSet;

use ndbft::engine::TraceRecord;
use ndbft::sim::{self, Behavior, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/deadlock_order.toml");
    let deadlock = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
    let mut crash = deadlock.clone();
    crash.name = "non-terminating order".into();
    crash.faults[0].behavior = Behavior::CrashOrder;

    for scenario in [deadlock, crash] {
        let out = sim::run(&scenario, scenario.seed)?;
        println!("== {}", scenario.name);
        // Retransmissions repeat the same forgery; show each once.
        let mut seen = BTreeSet::new();
        for rec in &out.trace {
            match rec {
                TraceRecord::Fault { replica, seq, .. } if seen.insert((*replica, *seq)) => println!("{}", rec.to_json_line()),
                TraceRecord::Suspect { .. } | TraceRecord::Restart { .. } => println!("{}", rec.to_json_line()),
                _ => {}
            }
        }
        println!("completed {} of {}, safe {}", out.metrics.completed, scenario.workload.requests_per_client, out.report.is_safe());
    }
    Ok(())
}
