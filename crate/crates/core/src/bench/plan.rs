use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::distribution::{RankMeta, StrategySpec};
use crate::engine::{EngineConfig, EngineKind};
use crate::model::{DatasetDecl, ElemKind, Extent, Region, WrittenChunk};

/// What the writers' steps go through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Writers append to container files and block while doing so.
    FileOnly,
    /// Writers stream to reader processes that load their share.
    Stream,
    /// Writers stream to pipe processes that store into container files.
    StreamToFile,
}

/// Ranks placed on one virtual host.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    pub hostname: String,
    #[serde(default)]
    pub writers: Vec<usize>,
    #[serde(default)]
    pub readers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    pub writers: usize,
    #[serde(default)]
    pub readers: usize,
    pub bytes_per_writer_per_step: u64,
    #[serde(default)]
    pub compute_delay_ms: u64,
    /// Synthetic analysis time a reader spends on each step before releasing it.
    #[serde(default)]
    pub reader_delay_ms: u64,
    pub duration_s: u64,
    /// Virtual host layout; everything on one host when empty.
    #[serde(default)]
    pub topology: Vec<HostSpec>,
    /// Writers' engine: file for `file_only`, stream otherwise.
    pub engine: EngineConfig,
    /// Pipes' file engine in `stream_to_file`.
    #[serde(default)]
    pub sink: Option<EngineConfig>,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Time children get to rendezvous before the window opens.
    #[serde(default = "default_grace")]
    pub startup_grace_ms: u64,
}

fn default_name() -> String {
    "bench".into()
}

fn default_repetitions() -> usize {
    3
}

fn default_grace() -> u64 {
    3000
}

pub const DATASET: &str = "fields/payload";

impl BenchPlan {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| BenchError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Plan(m));
        if self.writers == 0 {
            return bad("writers must be at least 1".into());
        }
        if self.duration_s == 0 {
            return bad("duration_s must be at least 1".into());
        }
        if self.bytes_per_writer_per_step == 0 {
            return bad("bytes_per_writer_per_step must be positive".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        self.engine.validate().map_err(|e| BenchError::Plan(e.to_string()))?;
        self.strategy.validate().map_err(|e| BenchError::Plan(e.to_string()))?;
        match self.mode {
            Mode::FileOnly if self.engine.engine != EngineKind::File => {
                return bad("file_only needs a file engine".into());
            }
            Mode::Stream | Mode::StreamToFile if self.engine.engine != EngineKind::Stream => {
                return bad(format!("{:?} needs a stream engine", self.mode));
            }
            Mode::Stream | Mode::StreamToFile if self.readers == 0 => {
                return bad("streaming plans need at least one reader".into());
            }
            _ => {}
        }
        if self.mode == Mode::StreamToFile {
            match &self.sink {
                Some(s) if s.engine == EngineKind::File => s.validate().map_err(|e| BenchError::Plan(e.to_string()))?,
                _ => return bad("stream_to_file needs a file engine sink".into()),
            }
        }
        if !self.topology.is_empty() {
            let mut w: Vec<usize> = self.topology.iter().flat_map(|h| h.writers.iter().copied()).collect();
            let mut r: Vec<usize> = self.topology.iter().flat_map(|h| h.readers.iter().copied()).collect();
            w.sort_unstable();
            r.sort_unstable();
            if w != (0..self.writers).collect::<Vec<_>>() || r != (0..self.readers).collect::<Vec<_>>() {
                return bad("topology must place every writer and reader rank exactly once".into());
            }
        }
        Ok(())
    }

    pub fn reader_count(&self) -> usize {
        match self.mode {
            Mode::FileOnly => 0,
            _ => self.readers,
        }
    }

    pub fn writer_host(&self, rank: usize) -> String {
        self.topology
            .iter()
            .find(|h| h.writers.contains(&rank))
            .map_or_else(|| "node0".to_owned(), |h| h.hostname.clone())
    }

    pub fn reader_host(&self, rank: usize) -> String {
        self.topology
            .iter()
            .find(|h| h.readers.contains(&rank))
            .map_or_else(|| "node0".to_owned(), |h| h.hostname.clone())
    }

    /// The dataset every step carries: one row per writer rank.
    pub fn dataset(&self) -> DatasetDecl {
        let extent = Extent::new(vec![self.writers as u64, self.bytes_per_writer_per_step]).expect("nonzero extent");
        DatasetDecl::new(DATASET, ElemKind::U8, extent).expect("valid name")
    }

    pub fn chunk_of(&self, rank: usize) -> Region {
        Region::new(vec![rank as u64, 0], vec![1, self.bytes_per_writer_per_step]).expect("nonzero chunk")
    }

    /// The chunk table every step announces.
    pub fn chunk_table(&self) -> Vec<WrittenChunk> {
        (0..self.writers)
            .map(|r| WrittenChunk {
                dataset: DATASET.into(),
                region: self.chunk_of(r),
                producer_rank: r,
                hostname: self.writer_host(r),
            })
            .collect()
    }

    pub fn reader_roster(&self) -> Vec<RankMeta> {
        (0..self.readers).map(|r| RankMeta::new(r, self.reader_host(r))).collect()
    }
}
