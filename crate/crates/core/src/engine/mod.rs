//! Step-based writer and reader engines.
//!
//! Both backends share one API: a writer brackets each step with
//! [`Writer::begin_step`] / [`Writer::end_step`] and puts chunks in
//! between; a reader walks steps with [`Reader::next_step`] and loads
//! regions with [`Reader::get_region`]. Which backend runs is decided by
//! [`EngineConfig`] at runtime.

mod config;
pub mod contact;
pub mod file;
pub mod stream;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{EngineConfig, EngineKind, QueuePolicy, CONFIG_ENV};
pub use file::{FileReader, FileWriter};
pub use stream::{StreamReader, StreamWriter, WriterStats};

use crate::distribution::{self, ChunkSlab, DistributionError, RankMeta, StrategySpec};
use crate::model::{
    validate_region, AttrValue, ChunkViolation, CodecError, DatasetDecl, ModelError, Region,
    StepAnnouncement, WrittenChunk,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chunk(#[from] ChunkViolation),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no rendezvous at {0} before timeout")]
    RendezvousTimeout(PathBuf),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("payload has {got} bytes, region needs {expected}")]
    PayloadSize { expected: u64, got: u64 },
    #[error("no step is open")]
    OutsideStep,
    #[error("a step is already open")]
    StepOpen,
    #[error("step {step} does not follow step {last}")]
    StepOrder { step: u64, last: u64 },
    #[error("dataset {0:?} is not declared in this step")]
    UnknownDataset(String),
    #[error("dataset {0:?} redeclared with a different shape or type")]
    ConflictingDecl(String),
    #[error("region {region} of {dataset:?} is not fully covered by written chunks")]
    Unavailable { dataset: String, region: Region },
    #[error("corrupt container footer: {0}")]
    CorruptFooter(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("engine is closed")]
    Closed,
}

/// What happened to a step at `end_step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepOutcome {
    /// Staged in the stream queue; readers will be told about it.
    Published,
    /// Dropped because the stream queue was full.
    Discarded,
    /// Appended to a container file.
    Written,
}

/// A process group and the rank this handle plays in it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Distinguishes reader groups attached to the same stream.
    pub name: String,
    pub size: usize,
    pub me: RankMeta,
}

impl GroupSpec {
    pub fn new(name: impl Into<String>, size: usize, rank: usize, hostname: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            size,
            me: RankMeta::new(rank, hostname),
        }
    }

    /// A one-rank group on this host.
    pub fn solo(name: impl Into<String>) -> Self {
        Self::new(name, 1, 0, crate::host::local_hostname())
    }

    pub(crate) fn check(&self) -> Result<(), EngineError> {
        if self.size == 0 || self.me.rank >= self.size {
            return Err(EngineError::Config(format!(
                "rank {} outside group of size {}",
                self.me.rank, self.size
            )));
        }
        Ok(())
    }
}

/// One staged chunk: where it lives and its bytes.
#[derive(Clone, Debug)]
pub(crate) struct StoredChunk {
    pub dataset: String,
    pub region: Region,
    pub width: u64,
    pub bytes: Arc<Vec<u8>>,
}

/// Collects one rank's share of a step between begin and end.
#[derive(Debug)]
pub(crate) struct StepBuilder {
    pub ann: StepAnnouncement,
    pub chunks: Vec<StoredChunk>,
}

impl StepBuilder {
    pub fn new(step: u64) -> Self {
        Self {
            ann: StepAnnouncement::new(step),
            chunks: Vec::new(),
        }
    }

    pub fn declare(&mut self, decl: &DatasetDecl) -> Result<(), EngineError> {
        match self.ann.dataset(decl.name()) {
            Some(d) if d == decl => Ok(()),
            Some(_) => Err(EngineError::ConflictingDecl(decl.name().to_owned())),
            None => {
                self.ann.datasets.push(decl.clone());
                Ok(())
            }
        }
    }

    pub fn put(&mut self, me: &RankMeta, decl: &DatasetDecl, region: Region, payload: Vec<u8>) -> Result<(), EngineError> {
        validate_region(&region, decl)?;
        let expected = decl.payload_len(&region);
        if payload.len() as u64 != expected {
            return Err(EngineError::PayloadSize {
                expected,
                got: payload.len() as u64,
            });
        }
        self.declare(decl)?;
        self.ann.chunk_table.push(WrittenChunk {
            dataset: decl.name().to_owned(),
            region: region.clone(),
            producer_rank: me.rank,
            hostname: me.hostname.clone(),
        });
        self.chunks.push(StoredChunk {
            dataset: decl.name().to_owned(),
            region,
            width: decl.elem().width(),
            bytes: Arc::new(payload),
        });
        Ok(())
    }
}

/// Combines per-rank shares of one step into the announcement readers see.
/// Chunks are ordered by producer rank; the first declaration of a dataset
/// or attribute wins.
pub(crate) fn merge_parts<'a>(
    step: u64,
    parts: impl IntoIterator<Item = &'a StepAnnouncement>,
) -> Result<StepAnnouncement, EngineError> {
    let mut out = StepAnnouncement::new(step);
    for part in parts {
        for d in &part.datasets {
            match out.dataset(d.name()) {
                Some(existing) if existing != d => return Err(EngineError::ConflictingDecl(d.name().to_owned())),
                Some(_) => {}
                None => out.datasets.push(d.clone()),
            }
        }
        for (k, v) in &part.attributes {
            out.attributes.entry(k.clone()).or_insert_with(|| v.clone());
        }
        out.chunk_table.extend(part.chunk_table.iter().cloned());
    }
    out.chunk_table.sort_by_key(|c| c.producer_rank);
    Ok(out)
}

/// Writer side of a series.
pub enum Writer {
    Stream(StreamWriter),
    File(FileWriter),
}

macro_rules! delegate {
    ($self:ident, $h:ident => $e:expr) => {
        match $self {
            Writer::Stream($h) => $e,
            Writer::File($h) => $e,
        }
    };
}

/// Opens the writer side of `series` with the engine named in `cfg`.
pub fn open_writer(series: &str, group: &GroupSpec, cfg: &EngineConfig) -> Result<Writer, EngineError> {
    cfg.validate()?;
    group.check()?;
    Ok(match cfg.engine {
        EngineKind::Stream => Writer::Stream(StreamWriter::open(series, group, cfg)?),
        EngineKind::File => Writer::File(FileWriter::open(series, group, cfg)?),
    })
}

impl Writer {
    pub fn begin_step(&mut self, step: u64) -> Result<(), EngineError> {
        delegate!(self, w => w.begin_step(step))
    }

    /// Declares a dataset for the open step without writing data to it.
    pub fn declare(&mut self, decl: &DatasetDecl) -> Result<(), EngineError> {
        delegate!(self, w => w.declare(decl))
    }

    pub fn set_attribute(&mut self, key: &str, value: AttrValue) -> Result<(), EngineError> {
        delegate!(self, w => w.set_attribute(key, value))
    }

    pub fn put_chunk(&mut self, decl: &DatasetDecl, region: Region, payload: Vec<u8>) -> Result<(), EngineError> {
        delegate!(self, w => w.put_chunk(decl, region, payload))
    }

    pub fn end_step(&mut self) -> Result<StepOutcome, EngineError> {
        delegate!(self, w => w.end_step())
    }

    pub fn close(self) -> Result<(), EngineError> {
        delegate!(self, w => w.close())
    }

    pub fn me(&self) -> &RankMeta {
        delegate!(self, w => w.me())
    }
}

/// Reader side of a series.
pub enum Reader {
    Stream(StreamReader),
    File(FileReader),
}

macro_rules! delegate_r {
    ($self:ident, $h:ident => $e:expr) => {
        match $self {
            Reader::Stream($h) => $e,
            Reader::File($h) => $e,
        }
    };
}

/// Opens the reader side of `series` with the engine named in `cfg`.
pub fn open_reader(series: &str, group: &GroupSpec, cfg: &EngineConfig) -> Result<Reader, EngineError> {
    cfg.validate()?;
    group.check()?;
    Ok(match cfg.engine {
        EngineKind::Stream => Reader::Stream(StreamReader::open(series, group, cfg)?),
        EngineKind::File => Reader::File(FileReader::open(series, group)?),
    })
}

/// A slab this reader loaded, with its dataset.
#[derive(Clone, Debug)]
pub struct LoadedSlab {
    pub slab: ChunkSlab,
    pub dataset: String,
    pub bytes: Vec<u8>,
}

impl Reader {
    /// Blocks until the next step arrives; `None` at end of stream.
    pub fn next_step(&mut self) -> Result<Option<StepAnnouncement>, EngineError> {
        delegate_r!(self, r => r.next_step())
    }

    pub fn get_region(&mut self, dataset: &str, region: &Region) -> Result<Vec<u8>, EngineError> {
        delegate_r!(self, r => r.get_region(dataset, region))
    }

    pub fn release_step(&mut self) -> Result<(), EngineError> {
        delegate_r!(self, r => r.release_step())
    }

    /// The reader group, as used for distribution.
    pub fn roster(&self) -> Vec<RankMeta> {
        delegate_r!(self, r => r.roster())
    }

    pub fn me(&self) -> &RankMeta {
        delegate_r!(self, r => r.me())
    }

    pub fn current(&self) -> Option<&StepAnnouncement> {
        delegate_r!(self, r => r.current())
    }

    pub fn close(self) -> Result<(), EngineError> {
        delegate_r!(self, r => r.close())
    }

    /// Slabs of the current step that `strategy` gives to this rank.
    pub fn my_slabs(&self, strategy: &StrategySpec) -> Result<Vec<ChunkSlab>, EngineError> {
        let step = self.current().ok_or(EngineError::OutsideStep)?;
        let a = distribution::assign(strategy, &step.chunk_table, &self.roster(), &step.datasets)?;
        Ok(a.slabs(self.me().rank).to_vec())
    }

    /// Loads every slab of the current step that `strategy` gives to this rank.
    pub fn load_assigned(&mut self, strategy: &StrategySpec) -> Result<Vec<LoadedSlab>, EngineError> {
        let slabs = self.my_slabs(strategy)?;
        let table = self.current().ok_or(EngineError::OutsideStep)?.chunk_table.clone();
        slabs
            .into_iter()
            .map(|slab| {
                let dataset = table[slab.source].dataset.clone();
                let bytes = self.get_region(&dataset, &slab.region)?;
                Ok(LoadedSlab { slab, dataset, bytes })
            })
            .collect()
    }
}
