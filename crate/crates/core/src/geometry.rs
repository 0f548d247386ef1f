//! Hyperslab algebra: intersection, axis partitioning and volume-capped
//! slicing. Intervals are half-open, `[offset, offset + extent)`.

use thiserror::Error;

use crate::model::{Extent, Region};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("rank mismatch: {0} vs {1}")]
    RankMismatch(usize, usize),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("cannot partition into zero parts")]
    ZeroParts,
}

/// The largest region contained in both `a` and `b`, or `None` when they
/// share no cell.
pub fn intersect(a: &Region, b: &Region) -> Result<Option<Region>, GeometryError> {
    if a.rank() != b.rank() {
        return Err(GeometryError::RankMismatch(a.rank(), b.rank()));
    }
    let mut offset = Vec::with_capacity(a.rank());
    let mut extent = Vec::with_capacity(a.rank());
    for axis in 0..a.rank() {
        let lo = a.offset()[axis].max(b.offset()[axis]);
        let hi = a.end(axis).min(b.end(axis));
        if hi <= lo {
            return Ok(None);
        }
        offset.push(lo);
        extent.push(hi - lo);
    }
    Ok(Some(Region::new(offset, extent).expect("non-empty overlap")))
}

/// Splits `global` into `n_parts` contiguous slabs along `axis`.
///
/// Slab lengths differ by at most one, longer slabs first. When `n_parts`
/// exceeds the axis length the trailing parts are `None`.
pub fn partition_axis(
    global: &Extent,
    n_parts: usize,
    axis: usize,
) -> Result<Vec<Option<Region>>, GeometryError> {
    if n_parts == 0 {
        return Err(GeometryError::ZeroParts);
    }
    if axis >= global.rank() {
        return Err(GeometryError::AxisOutOfRange {
            axis,
            rank: global.rank(),
        });
    }
    let len = global.dims()[axis];
    let n = n_parts as u64;
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    let parts = (0..n)
        .map(|i| {
            let size = base + u64::from(i < extra);
            if size == 0 {
                return None;
            }
            let mut offset = vec![0; global.rank()];
            let mut extent = global.dims().to_vec();
            offset[axis] = start;
            extent[axis] = size;
            start += size;
            Some(Region::new(offset, extent).expect("non-empty slab"))
        })
        .collect();
    Ok(parts)
}

/// Cuts `r` into pieces of at most `cap` cells.
///
/// Whole hyperplanes along axis 0 are grouped greedily; only when a single
/// hyperplane exceeds `cap` does slicing recurse into the next axis.
pub fn slice_to_cap(r: &Region, cap: u64) -> Vec<Region> {
    let cap = cap.max(1);
    let mut out = Vec::new();
    slice_axis(r.offset().to_vec(), r.extent().dims().to_vec(), 0, cap, &mut out);
    out
}

fn slice_axis(offset: Vec<u64>, extent: Vec<u64>, axis: usize, cap: u64, out: &mut Vec<Region>) {
    let volume: u64 = extent[axis..].iter().product();
    if volume <= cap {
        out.push(Region::new(offset, extent).expect("valid piece"));
        return;
    }
    let plane: u64 = extent[axis + 1..].iter().product();
    let len = extent[axis];
    let start = offset[axis];
    if plane <= cap {
        let rows = cap / plane;
        let mut pos = 0;
        while pos < len {
            let take = rows.min(len - pos);
            let (mut o, mut e) = (offset.clone(), extent.clone());
            o[axis] = start + pos;
            e[axis] = take;
            out.push(Region::new(o, e).expect("valid piece"));
            pos += take;
        }
    } else {
        for i in 0..len {
            let (mut o, mut e) = (offset.clone(), extent.clone());
            o[axis] = start + i;
            e[axis] = 1;
            slice_axis(o, e, axis + 1, cap, out);
        }
    }
}

/// Row-major linear index of `point` inside `region`.
fn linear_index(region: &Region, point: &[u64]) -> u64 {
    let dims = region.extent().dims();
    point
        .iter()
        .zip(region.offset())
        .zip(dims)
        .fold(0, |idx, ((p, o), n)| idx * n + (p - o))
}

/// Copies the cells of `sub` from a buffer laid out over `src_region` into
/// a buffer laid out over `dst_region`. `sub` must lie inside both.
pub fn copy_cells(
    src_region: &Region,
    src: &[u8],
    dst_region: &Region,
    dst: &mut [u8],
    sub: &Region,
    width: usize,
) {
    debug_assert!(src_region.contains(sub) && dst_region.contains(sub));
    let rank = sub.rank();
    let last = rank - 1;
    let run = sub.extent().dims()[last] as usize * width;
    let mut point = sub.offset().to_vec();
    loop {
        let s = linear_index(src_region, &point) as usize * width;
        let d = linear_index(dst_region, &point) as usize * width;
        dst[d..d + run].copy_from_slice(&src[s..s + run]);
        // odometer over every axis but the contiguous last one
        let mut axis = last;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            point[axis] += 1;
            if point[axis] < sub.end(axis) {
                break;
            }
            point[axis] = sub.offset()[axis];
        }
    }
}

/// Extracts the bytes of `sub` from a buffer laid out over `src_region`.
pub fn extract(src_region: &Region, src: &[u8], sub: &Region, width: usize) -> Vec<u8> {
    let mut out = vec![0; sub.volume() as usize * width];
    copy_cells(src_region, src, sub, &mut out, sub, width);
    out
}
