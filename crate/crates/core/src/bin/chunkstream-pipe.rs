use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chunkstream::distribution::StrategySpec;
use chunkstream::engine::{EngineConfig, GroupSpec, CONFIG_ENV};
use chunkstream::host::local_hostname;
use chunkstream::pipe::{run_pipe, Endpoint, PipeSpec};
use clap::{CommandFactory, Parser};

/// Copy a series step by step from one engine to one or two others.
#[derive(Parser, Debug)]
#[command(name = "chunkstream-pipe", version)]
struct Cli {
    /// Source series name.
    #[arg(long = "in")]
    input: String,
    /// Engine config of the source (JSON). Defaults to $CHUNKSTREAM_CONFIG.
    #[arg(long)]
    in_config: Option<PathBuf>,
    /// Sink series name.
    #[arg(long)]
    out: String,
    /// Engine config of the sink (JSON). Defaults to $CHUNKSTREAM_CONFIG.
    #[arg(long)]
    out_config: Option<PathBuf>,
    /// Second sink series name, for teeing.
    #[arg(long, requires = "out2_config")]
    out2: Option<String>,
    #[arg(long)]
    out2_config: Option<PathBuf>,
    /// Distribution strategy as JSON, e.g. '{"kind":"binpacking"}'.
    /// Defaults to the source config's strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Write per-step timings to this CSV file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Rank of this pipe instance.
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Number of pipe instances.
    #[arg(long, default_value_t = 1)]
    size: usize,
    /// Name the pipe group registers under at a stream source.
    #[arg(long, default_value = "pipe")]
    group: String,
}

fn config(flag: &str, path: Option<&Path>) -> anyhow::Result<EngineConfig> {
    match path {
        Some(p) => Ok(EngineConfig::load(p)?),
        None => match EngineConfig::from_env()? {
            Some(c) => Ok(c),
            None => Cli::command()
                .error(
                    clap::error::ErrorKind::MissingRequiredArgument,
                    format!("--{flag} is required when {CONFIG_ENV} is not set"),
                )
                .exit(),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let source = Endpoint::new(&cli.input, config("in-config", cli.in_config.as_deref())?);
    let mut sinks = vec![Endpoint::new(&cli.out, config("out-config", cli.out_config.as_deref())?)];
    if let Some(out2) = &cli.out2 {
        sinks.push(Endpoint::new(out2, config("out2-config", cli.out2_config.as_deref())?));
    }
    let strategy = match &cli.strategy {
        Some(json) => serde_json::from_str::<StrategySpec>(json).context("parsing --strategy")?,
        None => source.config.strategy.clone(),
    };
    let spec = PipeSpec {
        source,
        sinks,
        strategy,
        group: GroupSpec::new(cli.group, cli.size, cli.rank, local_hostname()),
    };
    let report = run_pipe(&spec)?;
    log::info!("copied {} steps, {} bytes", report.steps.len(), report.bytes());
    if let Some(path) = &cli.report {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(f)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.rank >= cli.size {
        Cli::command()
            .error(clap::error::ErrorKind::ValueValidation, "--rank must be below --size")
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chunkstream-pipe: {e:#}");
            ExitCode::FAILURE
        }
    }
}
