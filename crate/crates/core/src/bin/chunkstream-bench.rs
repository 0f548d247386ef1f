use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chunkstream::bench::worker::{run_worker, WorkerRole};
use chunkstream::bench::{run_bench, BenchPlan, BenchReport};
use clap::{Parser, Subcommand};

/// Run a benchmark plan and summarize its throughput.
#[derive(Parser, Debug)]
#[command(name = "chunkstream-bench", version, args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct Cli {
    /// Benchmark plan (JSON).
    #[arg(long, required = true)]
    plan: Option<PathBuf>,
    /// Output directory for samples, logs and summaries.
    #[arg(long, required = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    worker: Option<Worker>,
}

#[derive(Subcommand, Debug)]
enum Worker {
    /// One writer or reader rank; spawned by the orchestrator.
    #[command(name = "__worker", hide = true)]
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum)]
        role: WorkerRole,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        start_ms: u64,
    },
}

fn print(report: &BenchReport) {
    println!("{} ({:?})", report.name, report.mode);
    println!("rep  dumps  produced  discarded  store_MBps  load_MBps  sink_MBps  conns  pairs");
    let mb = |s: &Option<chunkstream::bench::RoleSummary>| {
        s.as_ref().map_or("-".to_owned(), |s| format!("{:.1}", s.throughput.mean / 1e6))
    };
    for r in &report.repetitions {
        println!(
            "{:>3}  {:>5}  {:>8}  {:>9}  {:>10}  {:>9}  {:>9}  {:>5}  {:>5}",
            r.repetition,
            r.dumps,
            r.produced,
            r.discarded,
            mb(&r.store),
            mb(&r.load),
            mb(&r.sink_store),
            r.data_connections,
            r.contacted_pairs
        );
    }
    println!("mean dumps: {:.2}", report.mean_dumps);
    if !report.strategies.is_empty() {
        println!("strategy  imbalance  connections");
        for s in &report.strategies {
            println!("{}  {:.3}  {}", serde_json::to_string(&s.strategy).unwrap_or_default(), s.imbalance, s.connections);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.worker {
        Some(Worker::Run { plan, role, rank, dir, start_ms }) => {
            let plan = BenchPlan::load(&plan)?;
            run_worker(&plan, role, rank, &dir, start_ms)?;
        }
        None => {
            let (plan, out) = (cli.plan.expect("required"), cli.out.expect("required"));
            let p = BenchPlan::load(&plan).with_context(|| format!("loading {}", plan.display()))?;
            let exe = std::env::current_exe().context("locating the bench binary")?;
            let report = run_bench(&p, &out, &exe)?;
            print(&report);
            for r in report.repetitions.iter().filter(|r| r.failure.is_some()) {
                eprintln!("repetition {} failed: {}", r.repetition, r.failure.as_deref().unwrap_or_default());
            }
            anyhow::ensure!(!report.failed(), "some workers failed; partial results are in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chunkstream-bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}
