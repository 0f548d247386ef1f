//! Aggregating container files.
//!
//! Writers are grouped `aggregation_group` at a time; every group shares
//! one container named `<series>.<group:05>.chnk`. Appends are serialized
//! through an exclusive file lock, so ranks in separate processes can
//! share a container.
//!
//! ```text
//! header   "CHNKSTRM" | u32 version
//! step     u32 kind=1 | u64 body len | u64 ann len | announcement | payloads | u32 crc32(body)
//! footer   u32 kind=2 | u64 json len | JSON index | u32 crc32(json) | u64 json len | "CHNKFOOT"
//! ```
//!
//! All integers are little-endian. Every closing writer appends a footer
//! indexing all records before it, so the last footer describes the whole
//! file and readers open it with one seek from the end. Without a valid
//! footer, [`recover_steps`] rebuilds the step list by scanning records.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{merge_parts, EngineConfig, EngineError, GroupSpec, StepBuilder, StepOutcome};
use crate::distribution::RankMeta;
use crate::geometry::{copy_cells, intersect};
use crate::model::{
    decode_announcement, encode_announcement, validate_region, AttrValue, DatasetDecl, Region,
    StepAnnouncement,
};

pub const CONTAINER_MAGIC: [u8; 8] = *b"CHNKSTRM";
pub const CONTAINER_VERSION: u32 = 1;
pub const FOOTER_MAGIC: [u8; 8] = *b"CHNKFOOT";
const HEADER_LEN: u64 = 12;
const KIND_STEP: u32 = 1;
const KIND_FOOTER: u32 = 2;

/// Location of one chunk's payload inside a container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLocation {
    pub dataset: String,
    pub region: Region,
    pub offset: u64,
    pub length: u64,
}

/// Index entry of one step record (one writer rank's share of a step).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub step: u64,
    pub rank: usize,
    pub record_offset: u64,
    pub ann_offset: u64,
    pub ann_len: u64,
    pub chunks: Vec<ChunkLocation>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    pub records: Vec<RecordEntry>,
}

pub fn container_path(series: &str, group: usize) -> PathBuf {
    PathBuf::from(format!("{series}.{group:05}.chnk"))
}

/// Container files belonging to `series`, in group order.
pub fn container_files(series: &str) -> Result<Vec<PathBuf>, EngineError> {
    let base = Path::new(series);
    let dir = match base.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    };
    let stem = base
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| EngineError::Config(format!("bad series name {series:?}")))?;
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(stem).and_then(|r| r.strip_prefix('.')) else {
            continue;
        };
        let Some(num) = rest.strip_suffix(".chnk") else { continue };
        if num.len() == 5 && num.bytes().all(|b| b.is_ascii_digit()) {
            found.push(dir.join(name));
        }
    }
    found.sort();
    Ok(found)
}

fn header_bytes() -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(&CONTAINER_MAGIC);
    h[8..].copy_from_slice(&CONTAINER_VERSION.to_le_bytes());
    h
}

fn check_header(file: &File) -> Result<(), EngineError> {
    let mut h = [0u8; HEADER_LEN as usize];
    file.read_exact_at(&mut h, 0)
        .map_err(|_| EngineError::Corrupt("missing container header".into()))?;
    if h[..8] != CONTAINER_MAGIC {
        return Err(EngineError::Corrupt("bad container magic".into()));
    }
    let version = u32::from_le_bytes(h[8..].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(EngineError::VersionMismatch {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    Ok(())
}

fn read_u32(file: &File, at: u64) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    file.read_exact_at(&mut b, at)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(file: &File, at: u64) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    file.read_exact_at(&mut b, at)?;
    Ok(u64::from_le_bytes(b))
}

fn chunk_locations(ann: &StepAnnouncement, mut offset: u64) -> Result<Vec<ChunkLocation>, EngineError> {
    ann.chunk_table
        .iter()
        .map(|c| {
            let decl = ann
                .dataset(&c.dataset)
                .ok_or_else(|| EngineError::UnknownDataset(c.dataset.clone()))?;
            let length = decl.payload_len(&c.region);
            let loc = ChunkLocation {
                dataset: c.dataset.clone(),
                region: c.region.clone(),
                offset,
                length,
            };
            offset += length;
            Ok(loc)
        })
        .collect()
}

/// Result of walking a container record by record.
#[derive(Clone, Debug, Default)]
pub struct Scan {
    pub records: Vec<RecordEntry>,
    /// Why the walk stopped before the end of the file, if it did.
    pub stopped: Option<String>,
}

/// Walks every record from the header on. With `verify`, step record
/// checksums are checked too.
pub fn scan_records(file: &File, verify: bool) -> Result<Scan, EngineError> {
    check_header(file)?;
    let len = file.metadata()?.len();
    let mut pos = HEADER_LEN;
    let mut scan = Scan::default();
    while pos < len {
        if pos + 12 > len {
            scan.stopped = Some(format!("truncated record header at {pos}"));
            break;
        }
        let kind = read_u32(file, pos)?;
        let body_len = read_u64(file, pos + 4)?;
        let body = pos + 12;
        match kind {
            KIND_STEP => {
                if body.saturating_add(body_len).saturating_add(4) > len || body_len < 8 {
                    scan.stopped = Some(format!("truncated step record at {pos}"));
                    break;
                }
                if verify {
                    let mut bytes = vec![0u8; body_len as usize];
                    file.read_exact_at(&mut bytes, body)?;
                    if crc32fast::hash(&bytes) != read_u32(file, body + body_len)? {
                        scan.stopped = Some(format!("checksum mismatch in record at {pos}"));
                        break;
                    }
                }
                let ann_len = read_u64(file, body)?;
                if 8 + ann_len > body_len {
                    scan.stopped = Some(format!("bad announcement length at {pos}"));
                    break;
                }
                let mut ann_bytes = vec![0u8; ann_len as usize];
                file.read_exact_at(&mut ann_bytes, body + 8)?;
                let ann = match decode_announcement(&ann_bytes) {
                    Ok(a) => a,
                    Err(e) => {
                        scan.stopped = Some(format!("bad announcement at {pos}: {e}"));
                        break;
                    }
                };
                let chunks = chunk_locations(&ann, body + 8 + ann_len)?;
                let rank = ann.chunk_table.first().map_or(0, |c| c.producer_rank);
                scan.records.push(RecordEntry {
                    step: ann.step_index,
                    rank: ann_rank(&ann).unwrap_or(rank),
                    record_offset: pos,
                    ann_offset: body + 8,
                    ann_len,
                    chunks,
                });
                pos = body + body_len + 4;
            }
            KIND_FOOTER => {
                let end = body.saturating_add(body_len).saturating_add(4 + 16);
                if end > len {
                    scan.stopped = Some(format!("truncated footer at {pos}"));
                    break;
                }
                pos = end;
            }
            other => {
                scan.stopped = Some(format!("unknown record kind {other} at {pos}"));
                break;
            }
        }
    }
    Ok(scan)
}

const RANK_ATTR: &str = "__chunkstream_writer_rank";

fn ann_rank(ann: &StepAnnouncement) -> Option<usize> {
    match ann.attributes.get(RANK_ATTR) {
        Some(AttrValue::Int(r)) => Some(*r as usize),
        _ => None,
    }
}

/// Reads the trailing footer. Fails with [`EngineError::CorruptFooter`]
/// when the trailer is missing or its checksum does not match.
pub fn read_footer(file: &File) -> Result<Footer, EngineError> {
    check_header(file)?;
    let len = file.metadata()?.len();
    if len < HEADER_LEN + 12 + 4 + 16 {
        return Err(EngineError::CorruptFooter("file too short for a footer".into()));
    }
    let mut magic = [0u8; 8];
    file.read_exact_at(&mut magic, len - 8)?;
    if magic != FOOTER_MAGIC {
        return Err(EngineError::CorruptFooter("trailer magic missing".into()));
    }
    let json_len = read_u64(file, len - 16)?;
    let json_at = (len - 20)
        .checked_sub(json_len)
        .filter(|&at| at >= HEADER_LEN + 12)
        .ok_or_else(|| EngineError::CorruptFooter("footer length out of range".into()))?;
    let mut json = vec![0u8; json_len as usize];
    file.read_exact_at(&mut json, json_at)?;
    if crc32fast::hash(&json) != read_u32(file, len - 20)? {
        return Err(EngineError::CorruptFooter("checksum mismatch".into()));
    }
    serde_json::from_slice(&json).map_err(|e| EngineError::CorruptFooter(e.to_string()))
}

/// Step indices of a series, read from container footers.
pub fn list_steps(series: &str) -> Result<Vec<u64>, EngineError> {
    let mut steps = Vec::new();
    for path in container_files(series)? {
        steps.extend(read_footer(&File::open(path)?)?.records.iter().map(|r| r.step));
    }
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// Step indices recoverable by scanning records, ignoring footers.
pub fn recover_steps(series: &str) -> Result<Vec<u64>, EngineError> {
    let mut steps = Vec::new();
    for path in container_files(series)? {
        steps.extend(scan_records(&File::open(path)?, true)?.records.iter().map(|r| r.step));
    }
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// File engine writer: one rank appending to its group's container.
pub struct FileWriter {
    me: RankMeta,
    file: File,
    path: PathBuf,
    throttle: Option<u64>,
    step: Option<StepBuilder>,
    last: Option<u64>,
}

impl FileWriter {
    pub fn open(series: &str, group: &GroupSpec, cfg: &EngineConfig) -> Result<Self, EngineError> {
        let path = container_path(series, group.me.rank / cfg.aggregation_group);
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        file.lock()?;
        let setup = (|| {
            if file.metadata()?.len() == 0 {
                file.write_all(&header_bytes())?;
                file.sync_data()?;
                Ok(())
            } else {
                check_header(&file)
            }
        })();
        file.unlock()?;
        setup?;
        Ok(Self {
            me: group.me.clone(),
            file,
            path,
            throttle: cfg.throttle_bytes_per_s,
            step: None,
            last: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn me(&self) -> &RankMeta {
        &self.me
    }

    pub fn begin_step(&mut self, step: u64) -> Result<(), EngineError> {
        if self.step.is_some() {
            return Err(EngineError::StepOpen);
        }
        if let Some(last) = self.last.filter(|&l| step <= l) {
            return Err(EngineError::StepOrder { step, last });
        }
        self.step = Some(StepBuilder::new(step));
        Ok(())
    }

    pub fn declare(&mut self, decl: &DatasetDecl) -> Result<(), EngineError> {
        self.step.as_mut().ok_or(EngineError::OutsideStep)?.declare(decl)
    }

    pub fn set_attribute(&mut self, key: &str, value: AttrValue) -> Result<(), EngineError> {
        let b = self.step.as_mut().ok_or(EngineError::OutsideStep)?;
        b.ann.attributes.insert(key.to_owned(), value);
        Ok(())
    }

    pub fn put_chunk(&mut self, decl: &DatasetDecl, region: Region, payload: Vec<u8>) -> Result<(), EngineError> {
        let me = self.me.clone();
        self.step.as_mut().ok_or(EngineError::OutsideStep)?.put(&me, decl, region, payload)
    }

    /// Appends the step and returns once it is synced to disk.
    pub fn end_step(&mut self) -> Result<StepOutcome, EngineError> {
        let mut b = self.step.take().ok_or(EngineError::OutsideStep)?;
        b.ann
            .attributes
            .insert(RANK_ATTR.into(), AttrValue::Int(self.me.rank as i64));
        let ann = encode_announcement(&b.ann)?;
        let payload: u64 = b.chunks.iter().map(|c| c.bytes.len() as u64).sum();
        let body_len = 8 + ann.len() as u64 + payload;
        let mut hasher = crc32fast::Hasher::new();
        let mut head = Vec::with_capacity(20 + ann.len());
        head.extend_from_slice(&KIND_STEP.to_le_bytes());
        head.extend_from_slice(&body_len.to_le_bytes());
        head.extend_from_slice(&(ann.len() as u64).to_le_bytes());
        head.extend_from_slice(&ann);
        hasher.update(&head[12..]);
        for c in &b.chunks {
            hasher.update(&c.bytes);
        }
        let crc = hasher.finalize();

        self.file.lock()?;
        let started = Instant::now();
        let res = (|| -> Result<(), EngineError> {
            self.file.seek(SeekFrom::End(0))?;
            self.file.write_all(&head)?;
            for c in &b.chunks {
                self.file.write_all(&c.bytes)?;
            }
            self.file.write_all(&crc.to_le_bytes())?;
            self.file.sync_data()?;
            if let Some(rate) = self.throttle {
                let target = Duration::from_secs_f64((12 + body_len + 4) as f64 / rate as f64);
                if let Some(rest) = target.checked_sub(started.elapsed()) {
                    std::thread::sleep(rest);
                }
            }
            Ok(())
        })();
        self.file.unlock()?;
        res?;
        self.last = Some(b.ann.step_index);
        Ok(StepOutcome::Written)
    }

    /// Appends a footer indexing every record in the container.
    pub fn close(mut self) -> Result<(), EngineError> {
        if self.step.is_some() {
            return Err(EngineError::StepOpen);
        }
        self.file.lock()?;
        let res = (|| -> Result<(), EngineError> {
            let scan = scan_records(&self.file, false)?;
            if let Some(why) = scan.stopped {
                return Err(EngineError::Corrupt(why));
            }
            let json = serde_json::to_vec(&Footer { records: scan.records }).expect("footer serializes");
            let mut out = Vec::with_capacity(json.len() + 36);
            out.extend_from_slice(&KIND_FOOTER.to_le_bytes());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&FOOTER_MAGIC);
            self.file.seek(SeekFrom::End(0))?;
            self.file.write_all(&out)?;
            self.file.sync_data()?;
            Ok(())
        })();
        self.file.unlock()?;
        res
    }
}

struct OpenStep {
    ann: StepAnnouncement,
    /// Aligned with `ann.chunk_table`: container index and location.
    locs: Vec<(usize, ChunkLocation)>,
}

/// File engine reader over all containers of a series.
pub struct FileReader {
    me: RankMeta,
    group_size: usize,
    files: Vec<File>,
    steps: BTreeMap<u64, Vec<(usize, RecordEntry)>>,
    last: Option<u64>,
    current: Option<OpenStep>,
}

impl FileReader {
    pub fn open(series: &str, group: &GroupSpec) -> Result<Self, EngineError> {
        let paths = container_files(series)?;
        if paths.is_empty() {
            return Err(EngineError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no container files for series {series:?}"),
            )));
        }
        let mut files = Vec::new();
        let mut steps: BTreeMap<u64, Vec<(usize, RecordEntry)>> = BTreeMap::new();
        for (i, path) in paths.iter().enumerate() {
            let file = File::open(path)?;
            for rec in read_footer(&file)?.records {
                steps.entry(rec.step).or_default().push((i, rec));
            }
            files.push(file);
        }
        Ok(Self {
            me: group.me.clone(),
            group_size: group.size,
            files,
            steps,
            last: None,
            current: None,
        })
    }

    pub fn me(&self) -> &RankMeta {
        &self.me
    }

    /// Containers carry no reader topology: every rank of the group is
    /// listed under the same empty hostname so all ranks agree on it.
    pub fn roster(&self) -> Vec<RankMeta> {
        (0..self.group_size).map(|r| RankMeta::new(r, "")).collect()
    }

    pub fn current(&self) -> Option<&StepAnnouncement> {
        self.current.as_ref().map(|s| &s.ann)
    }

    pub fn step_indices(&self) -> Vec<u64> {
        self.steps.keys().copied().collect()
    }

    pub fn next_step(&mut self) -> Result<Option<StepAnnouncement>, EngineError> {
        self.current = None;
        let next = match self.last {
            Some(l) => self.steps.range(l + 1..).next(),
            None => self.steps.iter().next(),
        };
        let Some((&step, records)) = next else {
            return Ok(None);
        };
        let mut records = records.clone();
        records.sort_by_key(|(f, r)| (r.rank, *f, r.record_offset));
        let mut parts = Vec::new();
        let mut pairs = Vec::new();
        for (f, rec) in &records {
            let mut bytes = vec![0u8; rec.ann_len as usize];
            self.files[*f].read_exact_at(&mut bytes, rec.ann_offset)?;
            let mut ann = decode_announcement(&bytes)?;
            ann.attributes.remove(RANK_ATTR);
            if ann.chunk_table.len() != rec.chunks.len() {
                return Err(EngineError::Corrupt(format!("index disagrees with record at {}", rec.record_offset)));
            }
            for (c, loc) in ann.chunk_table.iter().zip(&rec.chunks) {
                pairs.push((c.clone(), (*f, loc.clone())));
            }
            parts.push(ann);
        }
        let mut ann = merge_parts(step, &parts)?;
        pairs.sort_by_key(|(c, _)| c.producer_rank);
        let (table, locs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        ann.chunk_table = table;
        self.last = Some(step);
        self.current = Some(OpenStep { ann: ann.clone(), locs });
        Ok(Some(ann))
    }

    pub fn get_region(&mut self, dataset: &str, region: &Region) -> Result<Vec<u8>, EngineError> {
        let cur = self.current.as_ref().ok_or(EngineError::OutsideStep)?;
        let decl = cur
            .ann
            .dataset(dataset)
            .ok_or_else(|| EngineError::UnknownDataset(dataset.to_owned()))?;
        validate_region(region, decl)?;
        let width = decl.elem().width() as usize;
        let mut hits = Vec::new();
        for (c, loc) in cur.ann.chunk_table.iter().zip(&cur.locs) {
            if c.dataset == dataset {
                if let Some(sub) = intersect(&c.region, region)? {
                    hits.push((sub, loc));
                }
            }
        }
        let covered: u64 = hits.iter().map(|(s, _)| s.volume()).sum();
        if covered < region.volume() {
            return Err(EngineError::Unavailable {
                dataset: dataset.to_owned(),
                region: region.clone(),
            });
        }
        let mut out = vec![0u8; region.volume() as usize * width];
        for (sub, (f, loc)) in hits {
            let file = &self.files[*f];
            if sub == *region && loc.region == *region {
                file.read_exact_at(&mut out, loc.offset)?;
                continue;
            }
            let mut src = vec![0u8; loc.length as usize];
            file.read_exact_at(&mut src, loc.offset)?;
            copy_cells(&loc.region, &src, region, &mut out, &sub, width);
        }
        Ok(out)
    }

    pub fn release_step(&mut self) -> Result<(), EngineError> {
        self.current = None;
        Ok(())
    }

    pub fn close(self) -> Result<(), EngineError> {
        Ok(())
    }
}

/// Reads a whole file into memory, used by tests comparing containers.
pub fn read_all(path: &Path) -> Result<Vec<u8>, EngineError> {
    let mut v = Vec::new();
    File::open(path)?.read_to_end(&mut v)?;
    Ok(v)
}
