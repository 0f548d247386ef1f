//! Chunk distribution: deciding which reader rank loads which part of a
//! step's chunk table.
//!
//! Every strategy returns a complete [`Assignment`]: the slabs handed out
//! partition the written cells exactly, with nothing lost and nothing
//! loaded twice. Strategies differ in how they trade off keeping written
//! chunks whole, balancing bytes per reader, and keeping communication on
//! one host.

mod binpacking;
mod hostname;
mod hyperslabs;
mod round_robin;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::model::{DatasetDecl, Region, WrittenChunk};

pub use binpacking::{granular_ideal, next_fit};

/// A rank of a process group together with the host it runs on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankMeta {
    pub rank: usize,
    pub hostname: String,
}

impl RankMeta {
    pub fn new(rank: usize, hostname: impl Into<String>) -> Self {
        Self {
            rank,
            hostname: hostname.into(),
        }
    }
}

/// A sub-region of one written chunk.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSlab {
    /// Index into the step's chunk table.
    pub source: usize,
    pub region: Region,
}

/// Reader rank → slabs it must load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    per_reader: BTreeMap<usize, Vec<ChunkSlab>>,
}

impl Assignment {
    fn for_readers(readers: &[RankMeta]) -> Self {
        Self {
            per_reader: readers.iter().map(|r| (r.rank, Vec::new())).collect(),
        }
    }

    fn push(&mut self, reader: usize, slab: ChunkSlab) {
        self.per_reader.entry(reader).or_default().push(slab);
    }

    pub fn slabs(&self, reader: usize) -> &[ChunkSlab] {
        self.per_reader.get(&reader).map_or(&[], Vec::as_slice)
    }

    pub fn readers(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_reader.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[ChunkSlab])> {
        self.per_reader.iter().map(|(r, s)| (*r, s.as_slice()))
    }

    /// Bytes assigned to each reader.
    pub fn loads(&self, chunks: &[WrittenChunk], decls: &[DatasetDecl]) -> BTreeMap<usize, u64> {
        let widths = widths(decls);
        self.per_reader
            .iter()
            .map(|(r, slabs)| {
                let bytes = slabs
                    .iter()
                    .map(|s| s.region.volume() * widths.get(chunks[s.source].dataset.as_str()).copied().unwrap_or(0))
                    .sum();
                (*r, bytes)
            })
            .collect()
    }

    /// Distinct (writer rank, reader rank) pairs that must exchange data.
    pub fn connection_pairs(&self, chunks: &[WrittenChunk]) -> BTreeSet<(usize, usize)> {
        self.per_reader
            .iter()
            .flat_map(|(r, slabs)| slabs.iter().map(move |s| (chunks[s.source].producer_rank, *r)))
            .collect()
    }
}

/// Which distribution algorithm to run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    /// Deal whole chunks cyclically.
    RoundRobin,
    /// Give each reader one slab of every dataset along `axis`.
    Hyperslabs {
        #[serde(default)]
        axis: usize,
    },
    /// Slice to the ideal size and pack with Next-Fit.
    #[default]
    Binpacking,
    /// Keep chunks on their host via `secondary`, send the rest through `fallback`.
    ByHostname {
        secondary: Box<StrategySpec>,
        fallback: Box<StrategySpec>,
    },
}

impl StrategySpec {
    pub fn hyperslabs() -> Self {
        StrategySpec::Hyperslabs { axis: 0 }
    }

    pub fn by_hostname(secondary: StrategySpec, fallback: StrategySpec) -> Self {
        StrategySpec::ByHostname {
            secondary: Box::new(secondary),
            fallback: Box::new(fallback),
        }
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        if let StrategySpec::ByHostname { secondary, fallback } = self {
            for inner in [secondary, fallback] {
                if matches!(**inner, StrategySpec::ByHostname { .. }) {
                    return Err(DistributionError::NestedHostname);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistributionError {
    #[error("reader group is empty")]
    EmptyReaders,
    #[error("reader ranks must be unique and contiguous from 0, got {0:?}")]
    BadRanks(Vec<usize>),
    #[error("by_hostname cannot nest another by_hostname")]
    NestedHostname,
    #[error("chunk {index} references undeclared dataset {dataset:?}")]
    UnknownDataset { index: usize, dataset: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Shared inputs of one distribution run.
pub(crate) struct Ctx<'a> {
    chunks: &'a [WrittenChunk],
    decls: BTreeMap<&'a str, &'a DatasetDecl>,
}

impl<'a> Ctx<'a> {
    fn decl(&self, chunk: usize) -> &'a DatasetDecl {
        self.decls[self.chunks[chunk].dataset.as_str()]
    }

    fn width(&self, chunk: usize) -> u64 {
        self.decl(chunk).elem().width()
    }

    /// Chunk indices ordered by (producer rank, dataset, offset).
    fn sorted(&self, mut items: Vec<usize>) -> Vec<usize> {
        items.sort_by(|&a, &b| {
            let (ca, cb) = (&self.chunks[a], &self.chunks[b]);
            (ca.producer_rank, &ca.dataset, ca.region.offset(), a)
                .cmp(&(cb.producer_rank, &cb.dataset, cb.region.offset(), b))
        });
        items
    }
}

fn widths(decls: &[DatasetDecl]) -> BTreeMap<&str, u64> {
    decls.iter().map(|d| (d.name(), d.elem().width())).collect()
}

fn check_readers(readers: &[RankMeta]) -> Result<(), DistributionError> {
    if readers.is_empty() {
        return Err(DistributionError::EmptyReaders);
    }
    let mut ranks: Vec<usize> = readers.iter().map(|r| r.rank).collect();
    ranks.sort_unstable();
    if ranks.iter().enumerate().any(|(i, &r)| i != r) {
        return Err(DistributionError::BadRanks(readers.iter().map(|r| r.rank).collect()));
    }
    Ok(())
}

/// Distributes a step's chunk table over a reader group.
///
/// The result is deterministic for identical inputs.
pub fn assign(
    spec: &StrategySpec,
    chunks: &[WrittenChunk],
    readers: &[RankMeta],
    dataset_decls: &[DatasetDecl],
) -> Result<Assignment, DistributionError> {
    check_readers(readers)?;
    spec.validate()?;
    let decls: BTreeMap<&str, &DatasetDecl> = dataset_decls.iter().map(|d| (d.name(), d)).collect();
    if let Some((index, c)) = chunks
        .iter()
        .enumerate()
        .find(|(_, c)| !decls.contains_key(c.dataset.as_str()))
    {
        return Err(DistributionError::UnknownDataset {
            index,
            dataset: c.dataset.clone(),
        });
    }
    let ctx = Ctx { chunks, decls };
    let mut out = Assignment::for_readers(readers);
    dispatch(spec, &ctx, (0..chunks.len()).collect(), readers, &mut out)?;
    Ok(out)
}

fn dispatch(
    spec: &StrategySpec,
    ctx: &Ctx<'_>,
    items: Vec<usize>,
    readers: &[RankMeta],
    out: &mut Assignment,
) -> Result<(), DistributionError> {
    if items.is_empty() {
        return Ok(());
    }
    match spec {
        StrategySpec::RoundRobin => round_robin::run(ctx, items, readers, out),
        StrategySpec::Hyperslabs { axis } => hyperslabs::run(ctx, items, readers, *axis, out)?,
        StrategySpec::Binpacking => binpacking::run(ctx, items, readers, out),
        StrategySpec::ByHostname { secondary, fallback } => {
            hostname::run(ctx, items, readers, secondary, fallback, out)?
        }
    }
    Ok(())
}

/// Whole-chunk cyclic deal.
pub fn round_robin(chunks: &[WrittenChunk], readers: &[RankMeta], decls: &[DatasetDecl]) -> Result<Assignment, DistributionError> {
    assign(&StrategySpec::RoundRobin, chunks, readers, decls)
}

/// Per-dataset hyperslab partition intersected with the written chunks.
pub fn by_hyperslabs(
    chunks: &[WrittenChunk],
    readers: &[RankMeta],
    decls: &[DatasetDecl],
    axis: usize,
) -> Result<Assignment, DistributionError> {
    assign(&StrategySpec::Hyperslabs { axis }, chunks, readers, decls)
}

/// Slice to the ideal size, Next-Fit pack, deal bins cyclically.
pub fn binpacking(chunks: &[WrittenChunk], readers: &[RankMeta], decls: &[DatasetDecl]) -> Result<Assignment, DistributionError> {
    assign(&StrategySpec::Binpacking, chunks, readers, decls)
}

/// Host-local distribution with a fallback for hosts without readers.
pub fn by_hostname(
    chunks: &[WrittenChunk],
    readers: &[RankMeta],
    secondary: StrategySpec,
    fallback: StrategySpec,
    decls: &[DatasetDecl],
) -> Result<Assignment, DistributionError> {
    assign(&StrategySpec::by_hostname(secondary, fallback), chunks, readers, decls)
}

/// Per-reader byte loads of an assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Balance {
    pub loads: BTreeMap<usize, u64>,
    pub total: u64,
}

impl Balance {
    pub fn of(a: &Assignment, chunks: &[WrittenChunk], decls: &[DatasetDecl]) -> Self {
        let loads = a.loads(chunks, decls);
        let total = loads.values().sum();
        Self { loads, total }
    }

    pub fn max_load(&self) -> u64 {
        self.loads.values().copied().max().unwrap_or(0)
    }

    /// Exact per-reader share, `total / readers`.
    pub fn ideal(&self) -> f64 {
        self.total as f64 / self.loads.len().max(1) as f64
    }

    /// Largest load over the exact ideal share; 1.0 when there is no data.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.max_load() as f64 / self.ideal()
    }

    /// Largest load over a caller-supplied ideal, such as [`granular_ideal`].
    pub fn ratio_to(&self, ideal: u64) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.max_load() as f64 / ideal as f64
    }
}

/// Max reader bytes divided by the exact ideal bytes per reader.
pub fn imbalance(a: &Assignment, chunks: &[WrittenChunk], decls: &[DatasetDecl]) -> f64 {
    Balance::of(a, chunks, decls).ratio()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ElemKind, Extent};

    pub(crate) fn decl(name: &str, dims: &[u64]) -> DatasetDecl {
        DatasetDecl::new(name, ElemKind::U8, Extent::new(dims.to_vec()).unwrap()).unwrap()
    }

    pub(crate) fn chunk(name: &str, offset: &[u64], extent: &[u64], rank: usize, host: &str) -> WrittenChunk {
        WrittenChunk {
            dataset: name.into(),
            region: Region::new(offset.to_vec(), extent.to_vec()).unwrap(),
            producer_rank: rank,
            hostname: host.into(),
        }
    }

    pub(crate) fn readers(n: usize, host: &str) -> Vec<RankMeta> {
        (0..n).map(|r| RankMeta::new(r, host)).collect()
    }

    fn all_specs() -> Vec<StrategySpec> {
        vec![
            StrategySpec::RoundRobin,
            StrategySpec::hyperslabs(),
            StrategySpec::Binpacking,
            StrategySpec::by_hostname(StrategySpec::Binpacking, StrategySpec::RoundRobin),
        ]
    }

    #[test]
    fn empty_chunk_list() {
        for spec in all_specs() {
            let a = assign(&spec, &[], &readers(3, "h"), &[decl("d", &[4])]).unwrap();
            assert_eq!(a.readers().collect::<Vec<_>>(), vec![0, 1, 2]);
            assert!(a.iter().all(|(_, s)| s.is_empty()));
        }
    }

    #[test]
    fn single_reader_gets_everything() {
        let decls = [decl("d", &[10])];
        let chunks = [chunk("d", &[0], &[6], 0, "h"), chunk("d", &[6], &[4], 1, "h")];
        for spec in all_specs() {
            let a = assign(&spec, &chunks, &readers(1, "h"), &decls).unwrap();
            let covered: u64 = a.slabs(0).iter().map(|s| s.region.volume()).sum();
            assert_eq!(covered, 10, "{spec:?}");
        }
    }

    #[test]
    fn reader_group_checks() {
        let decls = [decl("d", &[4])];
        assert_eq!(
            assign(&StrategySpec::RoundRobin, &[], &[], &decls),
            Err(DistributionError::EmptyReaders)
        );
        let gap = vec![RankMeta::new(0, "a"), RankMeta::new(2, "a")];
        assert!(matches!(
            assign(&StrategySpec::RoundRobin, &[], &gap, &decls),
            Err(DistributionError::BadRanks(_))
        ));
        let nested = StrategySpec::by_hostname(
            StrategySpec::by_hostname(StrategySpec::RoundRobin, StrategySpec::RoundRobin),
            StrategySpec::RoundRobin,
        );
        assert_eq!(
            assign(&nested, &[], &readers(1, "a"), &decls),
            Err(DistributionError::NestedHostname)
        );
        let stray = [chunk("x", &[0], &[1], 0, "a")];
        assert!(matches!(
            assign(&StrategySpec::RoundRobin, &stray, &readers(1, "a"), &decls),
            Err(DistributionError::UnknownDataset { index: 0, .. })
        ));
    }

    #[test]
    fn strategy_json() {
        let doc = r#"{"kind":"by_hostname","secondary":{"kind":"binpacking"},"fallback":{"kind":"round_robin"}}"#;
        let spec: StrategySpec = serde_json::from_str(doc).unwrap();
        assert_eq!(
            spec,
            StrategySpec::by_hostname(StrategySpec::Binpacking, StrategySpec::RoundRobin)
        );
        let h: StrategySpec = serde_json::from_str(r#"{"kind":"hyperslabs"}"#).unwrap();
        assert_eq!(h, StrategySpec::Hyperslabs { axis: 0 });
    }

    #[test]
    fn imbalance_examples() {
        let decls = [decl("d", &[103])];
        let chunks = [
            chunk("d", &[0], &[100], 0, "h"),
            chunk("d", &[100], &[1], 1, "h"),
            chunk("d", &[101], &[1], 2, "h"),
            chunk("d", &[102], &[1], 3, "h"),
        ];
        let a = round_robin(&chunks, &readers(2, "h"), &decls).unwrap();
        let b = Balance::of(&a, &chunks, &decls);
        assert_eq!(b.loads[&0], 101);
        assert_eq!(b.loads[&1], 2);
        assert!((imbalance(&a, &chunks, &decls) - 101.0 / 51.5).abs() < 1e-12);

        let even = [chunk("d", &[0], &[50], 0, "h"), chunk("d", &[50], &[50], 1, "h")];
        let decls = [decl("d", &[100])];
        let a = round_robin(&even, &readers(2, "h"), &decls).unwrap();
        assert_eq!(imbalance(&a, &even, &decls), 1.0);
    }

    #[test]
    fn connection_pairs_follow_slabs() {
        let decls = [decl("d", &[8])];
        let chunks = [chunk("d", &[0], &[4], 0, "h"), chunk("d", &[4], &[4], 1, "h")];
        let a = by_hyperslabs(&chunks, &readers(2, "h"), &decls, 0).unwrap();
        assert_eq!(a.connection_pairs(&chunks), BTreeSet::from([(0, 0), (1, 1)]));
    }
}
