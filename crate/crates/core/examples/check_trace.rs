//! Runs a scenario file, writes its JSON-lines trace, and checks the
//! trace offline. Usage: check_trace [scenario.toml] [seed]
//!
//! Exits nonzero if the trace shows a safety violation.

use std::process::ExitCode;

use ndbft::sim::{self, Scenario};

fn main() -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/crashed_backup_f2.toml").into());
    let scenario = Scenario::from_toml(&std::fs::read_to_string(&path)?)?;
    let seed = match args.next() {
        Some(s) => s.parse()?,
        None => scenario.seed,
    };
    let out = sim::run(&scenario, seed)?;

    let trace_path = std::env::temp_dir().join(format!("ndbft-trace-{seed}.jsonl"));
    std::fs::write(&trace_path, out.trace_jsonl())?;
    let report = sim::check_safety_jsonl(&std::fs::read_to_string(&trace_path)?)?;
    println!("{}: {} records written to {}", scenario.name, out.trace.len(), trace_path.display());
    println!("seqs delivered: {}, suspicions: {}", report.deliveries.len(), report.suspicions.len());
    for v in &report.violations {
        println!("violation: {v:?}");
    }
    Ok(if report.is_safe() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
