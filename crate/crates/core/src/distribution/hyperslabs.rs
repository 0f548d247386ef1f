use std::collections::BTreeMap;

use super::{Assignment, ChunkSlab, Ctx, DistributionError, RankMeta};
use crate::geometry::{intersect, partition_axis};
use crate::model::Region;

pub(super) fn run(
    ctx: &Ctx<'_>,
    items: Vec<usize>,
    readers: &[RankMeta],
    axis: usize,
    out: &mut Assignment,
) -> Result<(), DistributionError> {
    let mut slabs: BTreeMap<&str, Vec<Option<Region>>> = BTreeMap::new();
    for source in ctx.sorted(items) {
        let decl = ctx.decl(source);
        if !slabs.contains_key(decl.name()) {
            slabs.insert(decl.name(), partition_axis(decl.extent(), readers.len(), axis)?);
        }
        let chunk = &ctx.chunks[source].region;
        for (reader, slab) in readers.iter().zip(&slabs[decl.name()]) {
            let Some(slab) = slab else { continue };
            if let Some(region) = intersect(chunk, slab)? {
                out.push(reader.rank, ChunkSlab { source, region });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::tests::{chunk, decl, readers};
    use super::super::{by_hyperslabs, DistributionError};
    use crate::geometry::GeometryError;
    use crate::model::Region;

    fn r(offset: &[u64], extent: &[u64]) -> Region {
        Region::new(offset.to_vec(), extent.to_vec()).unwrap()
    }

    #[test]
    fn chunk_cut_at_slab_boundary() {
        let decls = [decl("d", &[8])];
        let chunks = [chunk("d", &[2], &[4], 0, "h")];
        let a = by_hyperslabs(&chunks, &readers(2, "h"), &decls, 0).unwrap();
        assert_eq!(a.slabs(0)[0].region, r(&[2], &[2]));
        assert_eq!(a.slabs(1)[0].region, r(&[4], &[2]));
    }

    #[test]
    fn chunk_inside_one_slab_stays_whole() {
        let decls = [decl("d", &[8])];
        let chunks = [chunk("d", &[5], &[2], 0, "h")];
        let a = by_hyperslabs(&chunks, &readers(2, "h"), &decls, 0).unwrap();
        assert!(a.slabs(0).is_empty());
        assert_eq!(a.slabs(1).len(), 1);
        assert_eq!(a.slabs(1)[0].region, chunks[0].region);
    }

    #[test]
    fn datasets_partitioned_independently() {
        let decls = [decl("a", &[8]), decl("b", &[4, 2])];
        let chunks = [chunk("a", &[0], &[8], 0, "h"), chunk("b", &[0, 0], &[4, 2], 1, "h")];
        let a = by_hyperslabs(&chunks, &readers(2, "h"), &decls, 0).unwrap();
        assert_eq!(a.slabs(0)[0].region, r(&[0], &[4]));
        assert_eq!(a.slabs(0)[1].region, r(&[0, 0], &[2, 2]));
        assert_eq!(a.slabs(1)[0].region, r(&[4], &[4]));
        assert_eq!(a.slabs(1)[1].region, r(&[2, 0], &[2, 2]));
    }

    #[test]
    fn axis_beyond_rank_is_an_error() {
        let decls = [decl("d", &[8])];
        let chunks = [chunk("d", &[0], &[8], 0, "h")];
        assert_eq!(
            by_hyperslabs(&chunks, &readers(2, "h"), &decls, 1),
            Err(DistributionError::Geometry(GeometryError::AxisOutOfRange { axis: 1, rank: 1 }))
        );
    }
}
