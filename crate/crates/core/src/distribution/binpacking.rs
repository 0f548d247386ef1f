use super::{Assignment, ChunkSlab, Ctx, RankMeta};
use crate::geometry::slice_to_cap;
use crate::model::{DatasetDecl, WrittenChunk};

/// Bin capacity in bytes used by the binpacking strategy:
/// `ceil(total / readers)`, raised to the widest element so that a single
/// cell always fits.
pub fn granular_ideal(chunks: &[WrittenChunk], decls: &[DatasetDecl], readers: usize) -> u64 {
    let width = |c: &WrittenChunk| {
        decls
            .iter()
            .find(|d| d.name() == c.dataset)
            .map_or(1, |d| d.elem().width())
    };
    let total: u64 = chunks.iter().map(|c| c.region.volume() * width(c)).sum();
    let widest = chunks.iter().map(width).max().unwrap_or(1);
    total.div_ceil(readers.max(1) as u64).max(widest)
}

/// Next-Fit: keeps one open bin and starts a new one whenever the next
/// item does not fit. Returns the bin index of every item.
///
/// Any two consecutive bins together exceed `capacity`, so at most
/// `2 * ceil(total / capacity)` bins are used.
pub fn next_fit(sizes: &[u64], capacity: u64) -> Vec<usize> {
    let mut bin = 0;
    let mut load = 0u64;
    sizes
        .iter()
        .map(|&size| {
            if load > 0 && load + size > capacity {
                bin += 1;
                load = 0;
            }
            load += size;
            bin
        })
        .collect()
}

pub(super) fn run(ctx: &Ctx<'_>, items: Vec<usize>, readers: &[RankMeta], out: &mut Assignment) {
    let items = ctx.sorted(items);
    let total: u64 = items
        .iter()
        .map(|&i| ctx.chunks[i].region.volume() * ctx.width(i))
        .sum();
    let widest = items.iter().map(|&i| ctx.width(i)).max().unwrap_or(1);
    let ideal = total.div_ceil(readers.len() as u64).max(widest);

    let mut pieces = Vec::new();
    for source in items {
        let width = ctx.width(source);
        for region in slice_to_cap(&ctx.chunks[source].region, ideal / width) {
            pieces.push((region.volume() * width, ChunkSlab { source, region }));
        }
    }
    let sizes: Vec<u64> = pieces.iter().map(|(s, _)| *s).collect();
    let bins = next_fit(&sizes, ideal);
    for ((_, slab), bin) in pieces.into_iter().zip(bins) {
        out.push(readers[bin % readers.len()].rank, slab);
    }
}
