use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use portsim::bench::{check_lines, parse_sizes, run_bench, BenchName, BenchSpec, TopologyChoice};
use portsim::costmodel::CostParams;
use portsim::solve::CycleType;
use portsim::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cycle {
    V,
    W,
}

/// Runs one simulated benchmark and writes its results as CSV.
///
/// Columns per benchmark:
///   pingpong, unpack, scatter: variant,size,bytes,latency_us
///   stencil:                   config,n,latency_us,local_dominance_n
///   spectrum:                  op,space,n,time_s,bytes_per_s,flops_per_s,
///                              fit_latency_s,fit_bandwidth_bytes_per_s,crossover_n
///   mg_breakdown:              size,cycle,policy,level,visits,total_seconds
///   assembly_compare:          n,path,time_us,kernels
///
/// Check results go to stderr. Exit status: 0 when every check passes,
/// 2 when a check fails, 1 on bad arguments or input files.
#[derive(Debug, Parser)]
#[command(name = "bench", verbatim_doc_comment)]
struct Cli {
    #[arg(value_enum)]
    name: BenchName,
    /// Number of ranks (fixed for some benchmarks).
    #[arg(long)]
    ranks: Option<usize>,
    /// Comma-separated sizes; K/M/G suffixes are powers of 1024.
    #[arg(long)]
    sizes: Option<String>,
    /// JSON file of cost parameters; omitted fields keep their defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum)]
    topology: Option<TopologyChoice>,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timed iterations of latency loops.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Restrict mg_breakdown to one cycle type.
    #[arg(long, value_enum)]
    cycle: Option<Cycle>,
}

fn build_spec(cli: &Cli) -> Result<BenchSpec, Error> {
    let mut spec = BenchSpec::new(cli.name);
    spec.ranks = cli.ranks;
    if cli.ranks == Some(0) {
        return Err(Error::Usage("--ranks must be positive".into()));
    }
    spec.sizes = cli.sizes.as_deref().map(parse_sizes).transpose()?;
    if let Some(p) = &cli.params {
        spec.params = CostParams::load(p)?;
    }
    spec.topology = cli.topology;
    spec.iterations = cli.iters;
    spec.cycle = cli.cycle.map(|c| match c {
        Cycle::V => CycleType::V,
        Cycle::W => CycleType::W,
    });
    Ok(spec)
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parse(_) | Error::Io(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let spec = match build_spec(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bench: {e}");
            return exit_for(&e);
        }
    };
    let report = match run_bench(&spec) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench: {e}");
            return exit_for(&e);
        }
    };
    let csv = report.to_csv();
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, csv) {
                eprintln!("bench: cannot write {}: {e}", path.display());
                return ExitCode::from(1);
            }
        }
        None => print!("{csv}"),
    }
    eprint!("{}", check_lines(&report));
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
