//! Two faulty primaries. One equivocates on every seq; no single backup
//! can see that, but quorum intersection keeps correct replicas from
//! committing different requests at a seq. The other sends a bad VPRE
//! value at seq 9; every backup suspects it and refuses the slot, so with
//! no view change the calls behind it time out.

use std::collections::BTreeSet;

use ndbft::sim::{self, Behavior, FaultSpec, Scenario, Trigger};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/equivocating_primary.toml");
    let equivocating = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
    let mut wrong_values = equivocating.clone();
    wrong_values.name = "primary sends a bad VPRE value".into();
    wrong_values.faults = vec![FaultSpec { replica: 0, behavior: Behavior::WrongVpreValue, trigger: Trigger::AtSeq(9) }];

    let mut safe = true;
    for scenario in [equivocating, wrong_values] {
        let out = sim::run(&scenario, scenario.seed)?;
        let tampered: BTreeSet<_> = out.report.faults.values().flatten().copied().collect();
        let suspected: BTreeSet<_> = out.report.suspicions.iter().map(|s| s.seq).collect();
        println!("== {}", scenario.name);
        println!("calls completed {}, failed {}", out.metrics.completed, out.metrics.failed);
        println!("seqs tampered {}, of which suspected {}", tampered.len(), tampered.intersection(&suspected).count());
        for s in out.report.suspicions.iter().take(3) {
            println!("  {} suspects seq {} ({:?}): {}", s.replica, s.seq.0, s.reason, s.detail);
        }
        println!("safety violations {}", out.report.violations.len());
        safe &= out.report.is_safe();
    }
    if !safe {
        std::process::exit(1);
    }
    Ok(())
}
