//! Self-describing data model shared by every engine and tool.
//!
//! A series is a sequence of steps. Each step announces the datasets it
//! carries, a flat attribute map and the chunk table: which producer rank
//! wrote which hyperslab of which dataset. All geometry is in cells with
//! the slowest-varying axis first; byte sizes follow from [`ElemKind::width`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag written in front of every encoded announcement.
pub const ANNOUNCEMENT_VERSION: u32 = 1;

/// Errors raised when constructing model values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("extent must have at least one axis")]
    EmptyExtent,
    #[error("extent axis {axis} is zero")]
    ZeroExtent { axis: usize },
    #[error("offset rank {offset} does not match extent rank {extent}")]
    RankMismatch { offset: usize, extent: usize },
    #[error("invalid dataset name {0:?}")]
    InvalidName(String),
    #[error("dataset {0:?} declared twice")]
    DuplicateDataset(String),
    #[error("chunk {index} references undeclared dataset {dataset:?}")]
    UndeclaredDataset { index: usize, dataset: String },
    #[error("chunk {index}: {violation}")]
    BadChunk { index: usize, violation: ChunkViolation },
}

/// Shape of a dataset: cells per axis, slowest-varying axis first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct Extent(Vec<u64>);

impl Extent {
    pub fn new(dims: Vec<u64>) -> Result<Self, ModelError> {
        if dims.is_empty() {
            return Err(ModelError::EmptyExtent);
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(ModelError::ZeroExtent { axis });
        }
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[u64] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of cells.
    pub fn volume(&self) -> u64 {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<u64>> for Extent {
    type Error = ModelError;

    fn try_from(dims: Vec<u64>) -> Result<Self, Self::Error> {
        Self::new(dims)
    }
}

impl From<Extent> for Vec<u64> {
    fn from(e: Extent) -> Self {
        e.0
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// An n-dimensional hyperslab `[offset, offset + extent)` in a dataset's
/// global index space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawRegion")]
pub struct Region {
    offset: Vec<u64>,
    extent: Extent,
}

#[derive(Deserialize)]
struct RawRegion {
    offset: Vec<u64>,
    extent: Vec<u64>,
}

impl TryFrom<RawRegion> for Region {
    type Error = ModelError;

    fn try_from(raw: RawRegion) -> Result<Self, Self::Error> {
        Region::new(raw.offset, raw.extent)
    }
}

impl Region {
    pub fn new(offset: Vec<u64>, extent: Vec<u64>) -> Result<Self, ModelError> {
        let extent = Extent::new(extent)?;
        if offset.len() != extent.rank() {
            return Err(ModelError::RankMismatch {
                offset: offset.len(),
                extent: extent.rank(),
            });
        }
        Ok(Self { offset, extent })
    }

    /// The region covering a whole dataset.
    pub fn whole(extent: &Extent) -> Self {
        Self {
            offset: vec![0; extent.rank()],
            extent: extent.clone(),
        }
    }

    pub fn offset(&self) -> &[u64] {
        &self.offset
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    pub fn rank(&self) -> usize {
        self.offset.len()
    }

    /// Exclusive upper bound along `axis`.
    pub fn end(&self, axis: usize) -> u64 {
        self.offset[axis] + self.extent.0[axis]
    }

    pub fn volume(&self) -> u64 {
        self.extent.volume()
    }

    /// Whether `other` lies entirely inside `self`.
    pub fn contains(&self, other: &Region) -> bool {
        self.rank() == other.rank()
            && (0..self.rank())
                .all(|a| other.offset[a] >= self.offset[a] && other.end(a) <= self.end(a))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for axis in 0..self.rank() {
            if axis > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{}..{})", self.offset[axis], self.end(axis))?;
        }
        Ok(())
    }
}

/// Cell count of a region.
pub fn volume(r: &Region) -> u64 {
    r.volume()
}

/// Scalar element kind of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    I8,
    I16,
    I32,
    I64,
    U8,
    U16,
    U32,
    U64,
    F32,
    F64,
}

impl ElemKind {
    pub const ALL: [ElemKind; 10] = [
        ElemKind::I8,
        ElemKind::I16,
        ElemKind::I32,
        ElemKind::I64,
        ElemKind::U8,
        ElemKind::U16,
        ElemKind::U32,
        ElemKind::U64,
        ElemKind::F32,
        ElemKind::F64,
    ];

    /// Width of one element in bytes.
    pub fn width(self) -> u64 {
        match self {
            ElemKind::I8 | ElemKind::U8 => 1,
            ElemKind::I16 | ElemKind::U16 => 2,
            ElemKind::I32 | ElemKind::U32 | ElemKind::F32 => 4,
            ElemKind::I64 | ElemKind::U64 | ElemKind::F64 => 8,
        }
    }
}

/// Declaration of a dataset: a `/`-separated path, element kind and global shape.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDecl")]
pub struct DatasetDecl {
    name: String,
    elem: ElemKind,
    extent: Extent,
}

#[derive(Deserialize)]
struct RawDecl {
    name: String,
    elem: ElemKind,
    extent: Extent,
}

impl TryFrom<RawDecl> for DatasetDecl {
    type Error = ModelError;

    fn try_from(raw: RawDecl) -> Result<Self, Self::Error> {
        DatasetDecl::new(raw.name, raw.elem, raw.extent)
    }
}

impl DatasetDecl {
    pub fn new(name: impl Into<String>, elem: ElemKind, extent: Extent) -> Result<Self, ModelError> {
        let name = name.into();
        if name.is_empty() || name.split('/').any(str::is_empty) {
            return Err(ModelError::InvalidName(name));
        }
        Ok(Self { name, elem, extent })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn elem(&self) -> ElemKind {
        self.elem
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    /// Byte length of a payload covering `region`.
    pub fn payload_len(&self, region: &Region) -> u64 {
        region.volume() * self.elem.width()
    }
}

/// One hyperslab written by one producer rank.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WrittenChunk {
    pub dataset: String,
    pub region: Region,
    pub producer_rank: usize,
    pub hostname: String,
}

/// Why a chunk does not fit its dataset.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChunkViolation {
    #[error("chunk targets dataset {chunk:?}, declaration is {decl:?}")]
    DatasetMismatch { chunk: String, decl: String },
    #[error("chunk rank {chunk} does not match dataset rank {dataset}")]
    RankMismatch { chunk: usize, dataset: usize },
    #[error("chunk exceeds dataset along axis {axis}: end {end} > {bound}")]
    OutOfBounds { axis: usize, end: u64, bound: u64 },
}

/// Checks that a chunk lies inside its dataset's global extent.
pub fn validate_chunk(c: &WrittenChunk, d: &DatasetDecl) -> Result<(), ChunkViolation> {
    if c.dataset != d.name {
        return Err(ChunkViolation::DatasetMismatch {
            chunk: c.dataset.clone(),
            decl: d.name.clone(),
        });
    }
    validate_region(&c.region, d)
}

/// Checks that a region lies inside a dataset's global extent.
pub fn validate_region(r: &Region, d: &DatasetDecl) -> Result<(), ChunkViolation> {
    if r.rank() != d.extent.rank() {
        return Err(ChunkViolation::RankMismatch {
            chunk: r.rank(),
            dataset: d.extent.rank(),
        });
    }
    for (axis, &bound) in d.extent.dims().iter().enumerate() {
        let end = r.end(axis);
        if end > bound {
            return Err(ChunkViolation::OutOfBounds { axis, end, bound });
        }
    }
    Ok(())
}

/// Attribute values: 64-bit integers, 64-bit floats, strings and
/// homogeneous lists of those.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    IntList(Vec<i64>),
    FloatList(Vec<f64>),
    StrList(Vec<String>),
}

impl AttrValue {
    fn is_finite(&self) -> bool {
        match self {
            AttrValue::Float(v) => v.is_finite(),
            AttrValue::FloatList(vs) => vs.iter().all(|v| v.is_finite()),
            _ => true,
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

/// Self-describing metadata for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAnnouncement {
    pub step_index: u64,
    pub datasets: Vec<DatasetDecl>,
    pub attributes: BTreeMap<String, AttrValue>,
    pub chunk_table: Vec<WrittenChunk>,
}

impl StepAnnouncement {
    pub fn new(step_index: u64) -> Self {
        Self {
            step_index,
            ..Self::default()
        }
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetDecl> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Checks dataset uniqueness and that every chunk fits a declared dataset.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return Err(ModelError::DuplicateDataset(d.name.clone()));
            }
        }
        for (index, c) in self.chunk_table.iter().enumerate() {
            let decl = self
                .dataset(&c.dataset)
                .ok_or_else(|| ModelError::UndeclaredDataset {
                    index,
                    dataset: c.dataset.clone(),
                })?;
            validate_chunk(c, decl).map_err(|violation| ModelError::BadChunk { index, violation })?;
        }
        Ok(())
    }

    /// Total payload bytes of the chunk table.
    pub fn total_bytes(&self) -> u64 {
        self.chunk_table
            .iter()
            .map(|c| {
                let w = self.dataset(&c.dataset).map_or(0, |d| d.elem.width());
                c.region.volume() * w
            })
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("announcement truncated: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("announcement version {found}, expected {ANNOUNCEMENT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("{0} trailing bytes after announcement")]
    TrailingBytes(usize),
    #[error("attribute {0:?} holds a non-finite float")]
    NonFinite(String),
    #[error("announcement document: {0}")]
    Json(#[from] serde_json::Error),
}

/// Encodes an announcement as `[u32 version][u64 length][JSON]`, all
/// integers little-endian. Object keys are sorted so equal announcements
/// encode to identical bytes.
pub fn encode_announcement(s: &StepAnnouncement) -> Result<Vec<u8>, CodecError> {
    if let Some((k, _)) = s.attributes.iter().find(|(_, v)| !v.is_finite()) {
        return Err(CodecError::NonFinite(k.clone()));
    }
    // Value's map is a BTreeMap, which gives the sorted key order.
    let doc = serde_json::to_vec(&serde_json::to_value(s)?)?;
    let mut out = Vec::with_capacity(12 + doc.len());
    out.extend_from_slice(&ANNOUNCEMENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(&doc);
    Ok(out)
}

pub fn decode_announcement(bytes: &[u8]) -> Result<StepAnnouncement, CodecError> {
    let have = bytes.len() as u64;
    if bytes.len() < 12 {
        return Err(CodecError::Truncated { needed: 12, have });
    }
    let version = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if version != ANNOUNCEMENT_VERSION {
        return Err(CodecError::VersionMismatch { found: version });
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let needed = 12u64.saturating_add(len);
    if have < needed {
        return Err(CodecError::Truncated { needed, have });
    }
    if have > needed {
        return Err(CodecError::TrailingBytes((have - needed) as usize));
    }
    Ok(serde_json::from_slice(&bytes[12..])?)
}
