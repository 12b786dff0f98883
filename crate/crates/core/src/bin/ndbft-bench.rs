//! Latency/throughput sweeps and single scenario runs in virtual time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, ValueEnum};
use ndbft::bench::{self, BenchConfig};
use ndbft::mask::NdTypeMask;
use ndbft::sim::{self, Scenario};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Opt {
    On,
    Off,
}

/// Sweeps nondeterminism masks, value sizes and client counts over a
/// simulated n = 3f+1 deployment and reports latency and throughput in
/// virtual time. With --scenario, runs one scenario file instead and
/// checks it for safety.
///
/// Exits with status 1 if any run has a safety violation.
#[derive(Debug, Parser)]
#[command(name = "ndbft-bench", version)]
#[command(group(ArgGroup::new("sweep").multiple(true).args(["mask", "nd_size", "req_size", "clients", "iters", "f", "opt"])))]
struct Args {
    /// Comma-separated masks to sweep, e.g. 0,VPRE,NPRE,VPRE|NPOST.
    #[arg(long, value_delimiter = ',', value_parser = parse_mask)]
    mask: Vec<NdTypeMask>,
    /// Comma-separated bytes of nondeterministic values per class [default: 256].
    #[arg(long, value_delimiter = ',')]
    nd_size: Vec<usize>,
    /// Request and reply size in bytes [default: 1024].
    #[arg(long)]
    req_size: Option<usize>,
    /// Comma-separated client counts [default: 1,8].
    #[arg(long, value_delimiter = ',')]
    clients: Vec<u32>,
    /// Requests per client [default: 1000].
    #[arg(long)]
    iters: Option<u32>,
    /// Tolerated faults; n = 3f+1 [default: 1].
    #[arg(long)]
    f: Option<u32>,
    /// Digest dissemination and piggybacking [default: on].
    #[arg(long, value_enum)]
    opt: Option<Opt>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output path; a JSON mirror is written next to it. Scenario
    /// runs write the JSON-lines trace here. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run one scenario file (TOML) instead of a sweep.
    #[arg(long, conflicts_with = "sweep")]
    scenario: Option<PathBuf>,
}

fn parse_mask(s: &str) -> Result<NdTypeMask, String> {
    NdTypeMask::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match &args.scenario {
        Some(path) => run_scenario(path, &args),
        None => run_sweep(&args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("safety violation detected");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_sweep(args: &Args) -> Result<bool, Box<dyn std::error::Error>> {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        masks: if args.mask.is_empty() { d.masks } else { args.mask.clone() },
        nd_sizes: if args.nd_size.is_empty() { d.nd_sizes } else { args.nd_size.clone() },
        req_size: args.req_size.unwrap_or(d.req_size),
        clients: if args.clients.is_empty() { d.clients } else { args.clients.clone() },
        iters: args.iters.unwrap_or(d.iters),
        f: args.f.unwrap_or(d.f),
        optimizations: !matches!(args.opt, Some(Opt::Off)),
        seed: args.seed.unwrap_or(d.seed),
    };
    let rows = bench::bench(&cfg)?;
    match &args.out {
        Some(path) => {
            bench::write_csv(&rows, std::fs::File::create(path)?)?;
            std::fs::write(path.with_extension("json"), bench::to_json(&cfg, &rows))?;
        }
        None => bench::write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(rows.iter().all(|r| r.violations == 0))
}

fn run_scenario(path: &PathBuf, args: &Args) -> Result<bool, Box<dyn std::error::Error>> {
    let scenario = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
    let seed = args.seed.unwrap_or(scenario.seed);
    let out = sim::run(&scenario, seed)?;
    match &args.out {
        Some(p) => std::fs::write(p, out.trace_jsonl())?,
        None => print!("{}", out.trace_jsonl()),
    }
    let m = &out.metrics;
    eprintln!(
        "{}: seed {seed}, {} completed, {} failed, mean latency {:.0} us, {} messages, {} suspicions, {} violations",
        if scenario.name.is_empty() { path.display().to_string() } else { scenario.name.clone() },
        m.completed,
        m.failed,
        m.mean_latency_us(),
        m.msgs_total(),
        out.report.suspicions.len(),
        out.report.violations.len()
    );
    for v in &out.report.violations {
        eprintln!("violation: {v:?}");
    }
    Ok(out.report.is_safe())
}
