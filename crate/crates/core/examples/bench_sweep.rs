//! A small latency sweep over masks and client counts, written as CSV.

use ndbft::bench::{self, BenchConfig};
use ndbft::mask::NdTypeMask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = BenchConfig {
        masks: ["0", "VPRE", "NPRE", "NPOST"].iter().map(|m| NdTypeMask::parse(m)).collect::<Result<_, _>>()?,
        nd_sizes: vec![256, 4096],
        clients: vec![1, 8],
        iters: 100,
        ..BenchConfig::default()
    };
    let rows = bench::bench(&cfg)?;
    bench::write_csv(&rows, std::io::stdout())?;
    Ok(())
}
