//! Brute-force oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use chunkstream::distribution::{Assignment, RankMeta, StrategySpec};
use chunkstream::engine::{Reader, Writer};
use chunkstream::model::{AttrValue, DatasetDecl, ElemKind, Extent, Region, WrittenChunk};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn series(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

pub fn region(offset: &[u64], extent: &[u64]) -> Region {
    Region::new(offset.to_vec(), extent.to_vec()).unwrap()
}

/// Every cell of `r`, enumerated with nested counters.
pub fn cells(r: &Region) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new()];
    for axis in 0..r.rank() {
        let (lo, n) = (r.offset()[axis], r.extent().dims()[axis]);
        out = out
            .into_iter()
            .flat_map(|p| {
                (lo..lo + n).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn point_in(r: &Region, p: &[u64]) -> bool {
    (0..r.rank()).all(|a| p[a] >= r.offset()[a] && p[a] < r.offset()[a] + r.extent().dims()[a])
}

/// Row-major cell number of `p` inside a dataset of extent `dims`.
pub fn cell_number(dims: &[u64], p: &[u64]) -> usize {
    p.iter().zip(dims).fold(0u64, |acc, (&i, &n)| acc * n + i) as usize
}

/// Calls `f` on every cell of `r` in row-major order.
pub fn for_each_cell(r: &Region, mut f: impl FnMut(&[u64])) {
    let (lo, dims) = (r.offset(), r.extent().dims());
    let mut p = lo.to_vec();
    loop {
        f(&p);
        let mut axis = p.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            p[axis] += 1;
            if p[axis] < lo[axis] + dims[axis] {
                break;
            }
            p[axis] = lo[axis];
        }
    }
}

/// How often each cell of each dataset is written.
pub fn written_counts(chunks: &[WrittenChunk], decls: &[DatasetDecl]) -> BTreeMap<String, Vec<u32>> {
    let mut out = empty_counts(decls);
    for c in chunks {
        let dims = decls.iter().find(|d| d.name() == c.dataset).unwrap().extent().dims().to_vec();
        let counts = out.get_mut(&c.dataset).unwrap();
        for_each_cell(&c.region, |p| counts[cell_number(&dims, p)] += 1);
    }
    out
}

/// How often each cell is assigned, checking every slab lies in its source chunk.
pub fn assigned_counts(a: &Assignment, chunks: &[WrittenChunk], decls: &[DatasetDecl]) -> Result<BTreeMap<String, Vec<u32>>, String> {
    let mut out = empty_counts(decls);
    for (reader, slabs) in a.iter() {
        for s in slabs {
            let src = chunks.get(s.source).ok_or(format!("reader {reader}: bad source {}", s.source))?;
            let dims = decls.iter().find(|d| d.name() == src.dataset).unwrap().extent().dims().to_vec();
            let counts = out.get_mut(&src.dataset).unwrap();
            let mut outside = None;
            for_each_cell(&s.region, |p| {
                if !point_in(&src.region, p) {
                    outside.get_or_insert(p.to_vec());
                }
                counts[cell_number(&dims, p)] += 1;
            });
            if let Some(p) = outside {
                return Err(format!("reader {reader}: cell {p:?} outside source chunk {}", src.region));
            }
        }
    }
    Ok(out)
}

fn empty_counts(decls: &[DatasetDecl]) -> BTreeMap<String, Vec<u32>> {
    decls
        .iter()
        .map(|d| (d.name().to_owned(), vec![0; d.extent().volume() as usize]))
        .collect()
}

pub fn random_extent(rng: &mut StdRng, max_rank: usize, max_cells: u64) -> Vec<u64> {
    let rank = rng.random_range(1..=max_rank);
    let mut dims = Vec::new();
    let mut budget = max_cells;
    for axis in 0..rank {
        let left = rank - axis - 1;
        let cap = (budget as f64).powf(1.0 / (left + 1) as f64).floor().max(1.0) as u64;
        let n = rng.random_range(1..=cap.min(64));
        dims.push(n);
        budget /= n;
    }
    dims
}

/// Splits `whole` by random cuts into at most `max_parts` disjoint boxes.
pub fn kd_split(rng: &mut StdRng, whole: &Region, max_parts: usize) -> Vec<Region> {
    let target = rng.random_range(1..=max_parts.max(1));
    let mut parts = vec![whole.clone()];
    for _ in 0..target * 4 {
        if parts.len() >= target {
            break;
        }
        let i = rng.random_range(0..parts.len());
        let r = parts[i].clone();
        let axes: Vec<usize> = (0..r.rank()).filter(|&a| r.extent().dims()[a] > 1).collect();
        if axes.is_empty() {
            continue;
        }
        let axis = axes[rng.random_range(0..axes.len())];
        let n = r.extent().dims()[axis];
        let cut = rng.random_range(1..n);
        let (mut o2, mut e1, mut e2) = (r.offset().to_vec(), r.extent().dims().to_vec(), r.extent().dims().to_vec());
        e1[axis] = cut;
        e2[axis] = n - cut;
        o2[axis] += cut;
        parts[i] = Region::new(r.offset().to_vec(), e1).unwrap();
        parts.push(Region::new(o2, e2).unwrap());
    }
    parts
}

/// A random step: up to three datasets, each split into chunks spread
/// over writer ranks and hosts.
pub struct Instance {
    pub decls: Vec<DatasetDecl>,
    pub chunks: Vec<WrittenChunk>,
    pub readers: Vec<RankMeta>,
}

pub const ELEMS: [ElemKind; 4] = [ElemKind::U8, ElemKind::I16, ElemKind::F32, ElemKind::F64];

pub fn random_instance(rng: &mut StdRng, max_chunks: usize, max_readers: usize, cell_weighted: bool) -> Instance {
    let hosts = rng.random_range(1..=4usize);
    let writers = rng.random_range(1..=8usize);
    let ndatasets = rng.random_range(1..=3usize);
    let mut decls = Vec::new();
    let mut chunks = Vec::new();
    for d in 0..ndatasets {
        let dims = random_extent(rng, 3, 10_000);
        let elem = if cell_weighted { ElemKind::U8 } else { ELEMS[rng.random_range(0..ELEMS.len())] };
        let decl = DatasetDecl::new(format!("d{d}"), elem, Extent::new(dims.clone()).unwrap()).unwrap();
        let budget = (max_chunks - chunks.len()) / (ndatasets - d);
        for r in kd_split(rng, &Region::whole(decl.extent()), budget.max(1)) {
            if rng.random_bool(0.1) {
                continue; // leave a hole now and then
            }
            let rank = rng.random_range(0..writers);
            chunks.push(WrittenChunk {
                dataset: decl.name().to_owned(),
                region: r,
                producer_rank: rank,
                hostname: format!("h{}", rank % hosts),
            });
        }
        decls.push(decl);
    }
    let nreaders = rng.random_range(1..=max_readers);
    let reader_hosts = rng.random_range(1..=hosts + 1);
    let readers = (0..nreaders)
        .map(|r| RankMeta::new(r, format!("h{}", r % reader_hosts)))
        .collect();
    Instance { decls, chunks, readers }
}

pub fn random_strategy(rng: &mut StdRng) -> StrategySpec {
    let simple = |rng: &mut StdRng| match rng.random_range(0..3) {
        0 => StrategySpec::RoundRobin,
        1 => StrategySpec::Hyperslabs { axis: 0 },
        _ => StrategySpec::Binpacking,
    };
    if rng.random_bool(0.25) {
        let (s, f) = (simple(rng), simple(rng));
        StrategySpec::by_hostname(s, f)
    } else {
        simple(rng)
    }
}

/// Deterministic payload bytes of chunk `index` in `step`.
pub fn pattern(step: u64, index: usize, len: usize) -> Vec<u8> {
    let mut x = (step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9)) | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect()
}

/// Dense dataset image built cell by cell from chunk payloads; `None`
/// where no chunk wrote.
pub fn assemble(decl: &DatasetDecl, pieces: &[(Region, Vec<u8>)]) -> Vec<Option<Vec<u8>>> {
    let dims = decl.extent().dims().to_vec();
    let width = decl.elem().width() as usize;
    let mut out = vec![None; decl.extent().volume() as usize];
    for (r, bytes) in pieces {
        let rdims = r.extent().dims();
        for p in cells(r) {
            let local: Vec<u64> = p.iter().zip(r.offset()).map(|(a, b)| a - b).collect();
            let i = cell_number(rdims, &local) * width;
            out[cell_number(&dims, &p)] = Some(bytes[i..i + width].to_vec());
        }
    }
    out
}

/// Steps of a synthetic series; identical for every engine.
#[derive(Clone, Debug)]
pub struct SeriesPlan {
    pub writers: usize,
    pub steps: Vec<StepPlan>,
}

#[derive(Clone, Debug)]
pub struct StepPlan {
    pub index: u64,
    pub decls: Vec<DatasetDecl>,
    /// (writer rank, dataset position, region)
    pub chunks: Vec<(usize, usize, Region)>,
}

impl StepPlan {
    pub fn payload(&self, i: usize) -> Vec<u8> {
        let (_, d, r) = &self.chunks[i];
        pattern(self.index, i, self.decls[*d].payload_len(r) as usize)
    }

    /// Expected dense image of every dataset.
    pub fn expected(&self) -> BTreeMap<String, Vec<Option<Vec<u8>>>> {
        self.decls
            .iter()
            .enumerate()
            .map(|(di, decl)| {
                let pieces: Vec<_> = (0..self.chunks.len())
                    .filter(|&i| self.chunks[i].1 == di)
                    .map(|i| (self.chunks[i].2.clone(), self.payload(i)))
                    .collect();
                (decl.name().to_owned(), assemble(decl, &pieces))
            })
            .collect()
    }
}

/// Random series with full coverage of every dataset (≤ 4 steps, ≤ 8 chunks per step).
pub fn random_series(rng: &mut StdRng, writers: usize) -> SeriesPlan {
    let nsteps = rng.random_range(1..=4u64);
    let mut steps = Vec::new();
    let mut index = 0;
    for _ in 0..nsteps {
        index += rng.random_range(1..=2);
        let ndatasets = rng.random_range(1..=2usize);
        let mut decls = Vec::new();
        let mut chunks = Vec::new();
        for d in 0..ndatasets {
            let dims = random_extent(rng, 3, 2_000);
            let elem = ELEMS[rng.random_range(0..ELEMS.len())];
            let decl = DatasetDecl::new(format!("mesh/f{d}"), elem, Extent::new(dims).unwrap()).unwrap();
            for r in kd_split(rng, &Region::whole(decl.extent()), 8 / ndatasets) {
                chunks.push((rng.random_range(0..writers), d, r));
            }
            decls.push(decl);
        }
        steps.push(StepPlan { index, decls, chunks });
    }
    SeriesPlan { writers, steps }
}

/// Producer program: writes rank `rank`'s share of every step.
pub fn produce(w: &mut Writer, rank: usize, plan: &SeriesPlan) {
    for step in &plan.steps {
        w.begin_step(step.index).unwrap();
        for d in &step.decls {
            w.declare(d).unwrap();
        }
        w.set_attribute("time", AttrValue::Float(step.index as f64 * 0.5)).unwrap();
        for (i, (r, d, region)) in step.chunks.iter().enumerate() {
            if *r == rank {
                w.put_chunk(&step.decls[*d], region.clone(), step.payload(i)).unwrap();
            }
        }
        w.end_step().unwrap();
    }
}

/// Dense images one reader rank loaded: step → dataset → cells.
pub type Loaded = BTreeMap<u64, BTreeMap<String, Vec<Option<Vec<u8>>>>>;

/// Consumer program: loads this rank's share of every step.
pub fn consume(r: &mut Reader, strategy: &StrategySpec) -> Loaded {
    let mut out = Loaded::new();
    while let Some(step) = r.next_step().unwrap() {
        let mut images: BTreeMap<String, Vec<Option<Vec<u8>>>> = step
            .datasets
            .iter()
            .map(|d| (d.name().to_owned(), vec![None; d.extent().volume() as usize]))
            .collect();
        for slab in r.load_assigned(strategy).unwrap() {
            let decl = step.dataset(&slab.dataset).unwrap();
            let part = assemble(decl, &[(slab.slab.region.clone(), slab.bytes)]);
            for (cell, v) in images.get_mut(&slab.dataset).unwrap().iter_mut().zip(part) {
                if v.is_some() {
                    *cell = v;
                }
            }
        }
        out.insert(step.step_index, images);
        r.release_step().unwrap();
    }
    out
}

/// Overlays the images loaded by several reader ranks.
pub fn merge_loaded(parts: Vec<Loaded>) -> Loaded {
    let mut out = Loaded::new();
    for part in parts {
        for (step, sets) in part {
            let slot = out.entry(step).or_default();
            for (name, cells) in sets {
                match slot.get_mut(&name) {
                    None => {
                        slot.insert(name, cells);
                    }
                    Some(dst) => {
                        for (d, c) in dst.iter_mut().zip(cells) {
                            if c.is_some() {
                                *d = c;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn expected_series(plan: &SeriesPlan) -> Loaded {
    plan.steps.iter().map(|s| (s.index, s.expected())).collect()
}

// ---- geometry oracles ----

fn random_region_in(rng: &mut StdRng, dims: &[u64]) -> Region {
    let mut offset = Vec::new();
    let mut extent = Vec::new();
    for &n in dims {
        let lo = rng.random_range(0..n);
        offset.push(lo);
        extent.push(rng.random_range(1..=n - lo));
    }
    Region::new(offset, extent).unwrap()
}

/// One random case checking `intersect`, `partition_axis` and
/// `slice_to_cap` against per-cell enumeration.
pub fn check_geometry_case(rng: &mut StdRng) -> Result<(), String> {
    use chunkstream::geometry::{intersect, partition_axis, slice_to_cap};

    let dims = random_extent(rng, 3, 10_000);
    let global = Extent::new(dims.clone()).unwrap();
    let volume = global.volume() as usize;
    let (a, b) = (random_region_in(rng, &dims), random_region_in(rng, &dims));

    // intersect: every cell of the result lies in both, and nothing else does
    let mut both = 0u64;
    for_each_cell(&a, |p| both += u64::from(point_in(&b, p)));
    match intersect(&a, &b).map_err(|e| e.to_string())? {
        None if both == 0 => {}
        None => return Err(format!("{a} ∩ {b}: None but {both} shared cells")),
        Some(r) => {
            let mut inside = true;
            for_each_cell(&r, |p| inside &= point_in(&a, p) && point_in(&b, p));
            if !inside || r.volume() != both {
                return Err(format!("{a} ∩ {b} = {r}, oracle has {both} shared cells"));
            }
        }
    }
    if intersect(&a, &b).unwrap() != intersect(&b, &a).unwrap() {
        return Err(format!("{a} ∩ {b} is not symmetric"));
    }

    // partition_axis: a tiling with near-equal contiguous slabs
    let axis = rng.random_range(0..dims.len());
    let len = dims[axis];
    let n = rng.random_range(1..=len as usize + 2);
    let parts = partition_axis(&global, n, axis).map_err(|e| e.to_string())?;
    if parts.len() != n {
        return Err(format!("partition of {global:?} into {n}: {} parts", parts.len()));
    }
    let mut seen = vec![0u32; volume];
    let mut next = 0;
    let mut sizes = Vec::new();
    for p in &parts {
        let Some(p) = p else {
            sizes.push(0);
            continue;
        };
        let mut off = vec![0; dims.len()];
        off[axis] = next;
        let mut ext = dims.clone();
        ext[axis] = p.extent().dims()[axis];
        if p.offset() != off.as_slice() || p.extent().dims() != ext.as_slice() {
            return Err(format!("partition slab {p} is not the next full-width slab"));
        }
        next += ext[axis];
        sizes.push(ext[axis]);
        for_each_cell(p, |c| seen[cell_number(&dims, c)] += 1);
    }
    if seen.iter().any(|&c| c != 1) {
        return Err(format!("partition of {global:?} into {n} along {axis} is not a tiling"));
    }
    if sizes.windows(2).any(|w| w[0] < w[1]) || sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
        return Err(format!("partition sizes {sizes:?} are not balanced"));
    }
    if parts.iter().filter(|p| p.is_none()).count() != n.saturating_sub(len as usize) {
        return Err(format!("partition of length {len} into {n} has the wrong number of empty parts"));
    }

    // slice_to_cap: a tiling of `a` with pieces of at most `cap` cells
    let cap = rng.random_range(1..=a.volume() + 1);
    let mut seen = vec![0u32; volume];
    for piece in slice_to_cap(&a, cap) {
        if piece.volume() > cap {
            return Err(format!("slice {piece} of {a} exceeds cap {cap}"));
        }
        let mut inside = true;
        for_each_cell(&piece, |c| {
            inside &= point_in(&a, c);
            seen[cell_number(&dims, c)] += 1;
        });
        if !inside {
            return Err(format!("slice {piece} leaves {a}"));
        }
    }
    let mut ok = true;
    for_each_cell(&a, |c| ok &= seen[cell_number(&dims, c)] == 1);
    if !ok || seen.iter().map(|&c| c as u64).sum::<u64>() != a.volume() {
        return Err(format!("slices of {a} at cap {cap} are not a tiling"));
    }
    Ok(())
}

// ---- distribution oracles ----

pub fn simple_strategies() -> [StrategySpec; 3] {
    [StrategySpec::RoundRobin, StrategySpec::hyperslabs(), StrategySpec::Binpacking]
}

/// Assigned cells equal written cells, each exactly once per write.
pub fn check_completeness(inst: &Instance, spec: &StrategySpec) -> Result<(), String> {
    let a = chunkstream::distribution::assign(spec, &inst.chunks, &inst.readers, &inst.decls).map_err(|e| format!("{spec:?}: {e}"))?;
    let got = assigned_counts(&a, &inst.chunks, &inst.decls).map_err(|e| format!("{spec:?}: {e}"))?;
    if got != written_counts(&inst.chunks, &inst.decls) {
        return Err(format!("{spec:?}: assigned cells differ from written cells"));
    }
    Ok(())
}

/// Binpacking's largest reader load over the bin capacity `ceil(V/R)`.
pub fn binpacking_ratio(inst: &Instance) -> f64 {
    use chunkstream::distribution::{binpacking, granular_ideal, Balance};
    let a = binpacking(&inst.chunks, &inst.readers, &inst.decls).unwrap();
    let ideal = granular_ideal(&inst.chunks, &inst.decls, inst.readers.len());
    Balance::of(&a, &inst.chunks, &inst.decls).ratio_to(ideal)
}

/// Chunks on hosts with readers stay on their host; chunks on other
/// hosts are fully covered by the fallback.
pub fn check_locality(inst: &Instance, secondary: StrategySpec, fallback: StrategySpec) -> Result<(), String> {
    let spec = StrategySpec::by_hostname(secondary, fallback);
    let a = chunkstream::distribution::assign(&spec, &inst.chunks, &inst.readers, &inst.decls).map_err(|e| e.to_string())?;
    let reader_host: BTreeMap<usize, &str> = inst.readers.iter().map(|r| (r.rank, r.hostname.as_str())).collect();
    let served = |h: &str| inst.readers.iter().any(|r| r.hostname == h);
    for (reader, slabs) in a.iter() {
        for s in slabs {
            let host = inst.chunks[s.source].hostname.as_str();
            if served(host) && reader_host[&reader] != host {
                return Err(format!("{spec:?}: chunk on {host} sent to reader {reader} on {}", reader_host[&reader]));
            }
        }
    }
    let orphans: Vec<WrittenChunk> = inst.chunks.iter().filter(|c| !served(&c.hostname)).cloned().collect();
    let mut covered = empty_counts(&inst.decls);
    for (_, slabs) in a.iter() {
        for s in slabs.iter().filter(|s| !served(&inst.chunks[s.source].hostname)) {
            let src = &inst.chunks[s.source];
            let dims = inst.decls.iter().find(|d| d.name() == src.dataset).unwrap().extent().dims().to_vec();
            let counts = covered.get_mut(&src.dataset).unwrap();
            for_each_cell(&s.region, |p| counts[cell_number(&dims, p)] += 1);
        }
    }
    if covered != written_counts(&orphans, &inst.decls) {
        return Err(format!("{spec:?}: chunks of reader-less hosts are not covered exactly once"));
    }
    Ok(())
}

// ---- engine programs ----

pub const WAIT: std::time::Duration = std::time::Duration::from_secs(20);

pub fn spawn_reader<T: Send + 'static>(
    series: &str,
    c: &chunkstream::engine::EngineConfig,
    group: chunkstream::engine::GroupSpec,
    body: impl FnOnce(&mut Reader) -> T + Send + 'static,
) -> std::thread::JoinHandle<T> {
    let (series, c) = (series.to_owned(), c.clone());
    std::thread::spawn(move || {
        let mut r = chunkstream::engine::open_reader(&series, &group, &c).unwrap();
        let out = body(&mut r);
        r.close().unwrap();
        out
    })
}

/// Same producer and consumer code for either engine.
pub fn run_program(s: &str, c: &chunkstream::engine::EngineConfig, plan: &SeriesPlan, readers: usize) -> Loaded {
    use chunkstream::engine::{open_reader, open_writer, EngineKind, GroupSpec};
    let mut c = c.clone();
    c.rendezvous_timeout_s = 20.0;
    let strategy = StrategySpec::Binpacking;
    let writers: Vec<_> = (0..plan.writers)
        .map(|rank| {
            let (s, c, plan) = (s.to_owned(), c.clone(), plan.clone());
            std::thread::spawn(move || {
                let mut w = open_writer(&s, &GroupSpec::new("sim", plan.writers, rank, "n0"), &c).unwrap();
                if let Writer::Stream(sw) = &w {
                    sw.wait_for_readers(1, WAIT).unwrap();
                }
                produce(&mut w, rank, &plan);
                w.close().unwrap();
            })
        })
        .collect();
    if c.engine == EngineKind::File {
        for h in writers {
            h.join().unwrap();
        }
        let parts = (0..readers)
            .map(|r| {
                let mut rd = open_reader(s, &GroupSpec::new("ana", readers, r, "n0"), &c).unwrap();
                consume(&mut rd, &strategy)
            })
            .collect();
        return merge_loaded(parts);
    }
    let handles: Vec<_> = (0..readers)
        .map(|r| {
            let strategy = strategy.clone();
            spawn_reader(s, &c, GroupSpec::new("ana", readers, r, "n0"), move |rd| consume(rd, &strategy))
        })
        .collect();
    let parts = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for h in writers {
        h.join().unwrap();
    }
    merge_loaded(parts)
}

/// Everything a series holds, read back through one reader: per step its
/// declarations, attributes and the full bytes of every dataset.
pub type Snapshot = Vec<(u64, Vec<DatasetDecl>, BTreeMap<String, AttrValue>, Vec<Vec<u8>>)>;

pub fn snapshot(s: &str, c: &chunkstream::engine::EngineConfig) -> Snapshot {
    let mut r = chunkstream::engine::open_reader(s, &chunkstream::engine::GroupSpec::solo("check"), c).unwrap();
    let mut out = Vec::new();
    while let Some(step) = r.next_step().unwrap() {
        let data = step
            .datasets
            .iter()
            .map(|d| r.get_region(d.name(), &Region::whole(d.extent())).unwrap())
            .collect();
        out.push((step.step_index, step.datasets.clone(), step.attributes.clone(), data));
        r.release_step().unwrap();
    }
    r.close().unwrap();
    out
}

// ---- pipe CLI ----

pub fn pipe_exe() -> &'static str {
    env!("CARGO_BIN_EXE_chunkstream-pipe")
}

/// Writes an engine config file and returns its path.
pub fn config_file(dir: &Path, name: &str, c: &chunkstream::engine::EngineConfig) -> std::path::PathBuf {
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, serde_json::to_vec(c).unwrap()).unwrap();
    p
}

pub fn file_config() -> chunkstream::engine::EngineConfig {
    chunkstream::engine::EngineConfig::file()
}

pub fn stream_config() -> chunkstream::engine::EngineConfig {
    let mut c = chunkstream::engine::EngineConfig::stream();
    c.queue_policy = chunkstream::engine::QueuePolicy::Block;
    c.queue_depth = 2;
    c.rendezvous_timeout_s = 30.0;
    c
}

/// Writes `plan` into a file series from `plan.writers` threads.
pub fn write_file_series(s: &str, plan: &SeriesPlan) {
    use chunkstream::engine::{open_writer, GroupSpec};
    let handles: Vec<_> = (0..plan.writers)
        .map(|rank| {
            let (s, plan) = (s.to_owned(), plan.clone());
            std::thread::spawn(move || {
                let mut w = open_writer(&s, &GroupSpec::new("sim", plan.writers, rank, "n0"), &file_config()).unwrap();
                produce(&mut w, rank, &plan);
                w.close().unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

pub fn pipe_command(args: &[&std::ffi::OsStr]) -> std::process::Command {
    let mut c = std::process::Command::new(pipe_exe());
    c.args(args).env_remove(chunkstream::engine::CONFIG_ENV);
    c
}

/// file → stream → pipe → file. Returns snapshots of the source and the
/// final series, plus both per-step reports.
pub fn pipe_round_trip(dir: &Path, plan: &SeriesPlan) -> (Snapshot, Snapshot, String, String) {
    let (orig, mid, last) = (series(dir, "orig"), series(dir, "mid"), series(dir, "final"));
    write_file_series(&orig, plan);
    let fc = config_file(dir, "file", &file_config());
    let sc = config_file(dir, "stream", &stream_config());
    let (ra, rb) = (dir.join("a.csv"), dir.join("b.csv"));
    let os = |s: &str| std::ffi::OsString::from(s);
    let a = pipe_command(&[
        &os("--in"), &os(&orig), &os("--in-config"), fc.as_os_str(),
        &os("--out"), &os(&mid), &os("--out-config"), sc.as_os_str(),
        &os("--report"), ra.as_os_str(),
    ])
    .spawn()
    .unwrap();
    let b = pipe_command(&[
        &os("--in"), &os(&mid), &os("--in-config"), sc.as_os_str(),
        &os("--out"), &os(&last), &os("--out-config"), fc.as_os_str(),
        &os("--report"), rb.as_os_str(),
    ])
    .spawn()
    .unwrap();
    for (name, child) in [("file→stream", a), ("stream→file", b)] {
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success(), "{name} pipe failed: {:?}", out.status);
    }
    (
        snapshot(&orig, &file_config()),
        snapshot(&last, &file_config()),
        std::fs::read_to_string(ra).unwrap(),
        std::fs::read_to_string(rb).unwrap(),
    )
}

/// One file source teed into two file sinks. Returns the three snapshots.
pub fn pipe_tee(dir: &Path, plan: &SeriesPlan) -> [Snapshot; 3] {
    let (orig, t1, t2) = (series(dir, "src"), series(dir, "tee1"), series(dir, "tee2"));
    write_file_series(&orig, plan);
    let fc = config_file(dir, "file", &file_config());
    let os = |s: &str| std::ffi::OsString::from(s);
    let out = pipe_command(&[
        &os("--in"), &os(&orig), &os("--in-config"), fc.as_os_str(),
        &os("--out"), &os(&t1), &os("--out-config"), fc.as_os_str(),
        &os("--out2"), &os(&t2), &os("--out2-config"), fc.as_os_str(),
    ])
    .output()
    .unwrap();
    assert!(out.status.success(), "tee failed: {}", String::from_utf8_lossy(&out.stderr));
    [orig, t1, t2].map(|s| snapshot(&s, &file_config()))
}

// ---- bench ----

pub fn bench_exe() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_chunkstream-bench"))
}

pub fn bench_plan(v: serde_json::Value) -> chunkstream::bench::BenchPlan {
    let p: chunkstream::bench::BenchPlan = serde_json::from_value(v).unwrap();
    p.validate().unwrap();
    p
}

/// Two virtual hosts: writer 0 with readers 0 and 1 on `a`, writer 1
/// with reader 2 on `b`. Each chunk exceeds the binpacking share, so
/// binpacking slices both and spreads the pieces over all readers.
pub fn two_host_plan(strategy: StrategySpec) -> chunkstream::bench::BenchPlan {
    bench_plan(serde_json::json!({
        "name": "two-hosts",
        "mode": "stream",
        "writers": 2,
        "readers": 3,
        "bytes_per_writer_per_step": 4096,
        "compute_delay_ms": 50,
        "duration_s": 2,
        "repetitions": 1,
        "startup_grace_ms": 1500,
        "topology": [
            {"hostname": "a", "writers": [0], "readers": [0, 1]},
            {"hostname": "b", "writers": [1], "readers": [2]}
        ],
        "engine": {"engine": "stream", "queue_policy": "block", "queue_depth": 2},
        "strategy": strategy
    }))
}
