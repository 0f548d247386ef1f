use super::{Assignment, ChunkSlab, Ctx, RankMeta};

pub(super) fn run(ctx: &Ctx<'_>, items: Vec<usize>, readers: &[RankMeta], out: &mut Assignment) {
    for (i, source) in ctx.sorted(items).into_iter().enumerate() {
        out.push(
            readers[i % readers.len()].rank,
            ChunkSlab {
                source,
                region: ctx.chunks[source].region.clone(),
            },
        );
    }
}
