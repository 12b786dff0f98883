//! Runs a fault-free four-replica group under every nondeterminism class
//! and prints latency, throughput and message counts.

use ndbft::mask::NdTypeMask;
use ndbft::sim::{self, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for mask in ["0", "VPRE", "NPRE", "VPOST", "NPOST", "VPRE|NPRE|VPOST|NPOST"] {
        let mask = NdTypeMask::parse(mask)?;
        let text = format!(
            r#"
version = 1
name = "quickstart"
f = 1

[app]
kind = "for_mask"
mask = "{mask}"

[workload]
clients = 4
requests_per_client = 50
request_size = 256
"#
        );
        let scenario = Scenario::from_toml(&text)?;
        let out = sim::run(&scenario, 1)?;
        let m = &out.metrics;
        println!(
            "{:<24} completed {:>3}  mean {:>7.0} us  p99 {:>6} us  {:>7.0} req/s  {:>6} msgs  safe {}",
            mask.to_string(),
            m.completed,
            m.mean_latency_us(),
            m.percentile_latency_us(99.0),
            m.throughput_rps(),
            m.msgs_total(),
            out.report.is_safe(),
        );
    }
    Ok(())
}
