//! Benchmark harness: runs writer and reader processes for a fixed window
//! and reports throughput, dump counts and connection counts.

use std::path::PathBuf;

use thiserror::Error;

use crate::distribution::DistributionError;
use crate::engine::EngineError;
use crate::pipe::PipeError;

pub mod metrics;
pub mod plan;
mod runner;
pub mod worker;

pub use metrics::{MetricsError, Role, Sample};
pub use plan::{BenchPlan, HostSpec, Mode};
pub use runner::{run_bench, strategy_sweep, BenchReport, RepSummary, RoleSummary, StrategyRow};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pipe(#[from] PipeError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("samples: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad worker report {path}: {source}")]
    Report {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{role} {rank} failed ({status}); see {log}")]
    Worker {
        role: &'static str,
        rank: usize,
        status: String,
        log: PathBuf,
    },
}
