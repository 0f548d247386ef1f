use std::collections::BTreeMap;

use super::{dispatch, Assignment, Ctx, DistributionError, RankMeta, StrategySpec};

pub(super) fn run(
    ctx: &Ctx<'_>,
    items: Vec<usize>,
    readers: &[RankMeta],
    secondary: &StrategySpec,
    fallback: &StrategySpec,
    out: &mut Assignment,
) -> Result<(), DistributionError> {
    let mut local_readers: BTreeMap<&str, Vec<RankMeta>> = BTreeMap::new();
    for r in readers {
        local_readers.entry(r.hostname.as_str()).or_default().push(r.clone());
    }
    let mut per_host: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut leftover = Vec::new();
    for i in items {
        let host = ctx.chunks[i].hostname.as_str();
        if local_readers.contains_key(host) {
            per_host.entry(host).or_default().push(i);
        } else {
            leftover.push(i);
        }
    }
    for (host, chunks) in per_host {
        dispatch(secondary, ctx, chunks, &local_readers[host], out)?;
    }
    dispatch(fallback, ctx, leftover, readers, out)
}
