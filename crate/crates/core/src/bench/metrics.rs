//! Perceived throughput and box-plot statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Store,
    Load,
}

/// One rank's timing of one operation within a dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub role: Role,
    pub step: u64,
    pub rank: usize,
    pub bytes: u64,
    /// Request to completion.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("sample duration {0} is not positive")]
    BadDuration(f64),
}

/// Bytes of one dump over the slowest rank's time for it. A rank with
/// several samples in the dump is timed by their sum.
pub fn perceived_throughput(samples: &[Sample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_rank: BTreeMap<usize, f64> = BTreeMap::new();
    let mut bytes = 0u64;
    for s in samples {
        if s.seconds.is_nan() || s.seconds <= 0.0 {
            return Err(MetricsError::BadDuration(s.seconds));
        }
        *per_rank.entry(s.rank).or_default() += s.seconds;
        bytes += s.bytes;
    }
    let slowest = per_rank.values().copied().fold(0.0, f64::max);
    Ok(bytes as f64 / slowest)
}

/// Throughput of every dump of one role, keyed by step.
pub fn per_dump(samples: &[Sample], role: Role) -> Result<BTreeMap<u64, (u64, f64)>, MetricsError> {
    let mut by_step: BTreeMap<u64, Vec<Sample>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.role == role) {
        by_step.entry(s.step).or_default().push(s.clone());
    }
    by_step
        .into_iter()
        .map(|(step, v)| {
            let bytes = v.iter().map(|s| s.bytes).sum();
            Ok((step, (bytes, perceived_throughput(&v)?)))
        })
        .collect()
}

/// Headline throughput over many dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSummary {
    pub dumps: usize,
    pub total_bytes: u64,
    /// Plain mean of per-dump throughputs.
    pub mean: f64,
    /// Per-dump throughputs weighted by the bytes of each dump.
    pub weighted_mean: f64,
}

pub fn summarize(per_dump: &BTreeMap<u64, (u64, f64)>) -> Result<ThroughputSummary, MetricsError> {
    if per_dump.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = per_dump.len() as f64;
    let total_bytes: u64 = per_dump.values().map(|(b, _)| b).sum();
    let mean = per_dump.values().map(|(_, t)| t).sum::<f64>() / n;
    let weighted_mean = if total_bytes == 0 {
        mean
    } else {
        per_dump.values().map(|(b, t)| *b as f64 * t).sum::<f64>() / total_bytes as f64
    };
    Ok(ThroughputSummary {
        dumps: per_dump.len(),
        total_bytes,
        mean,
        weighted_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiskerStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub upper_whisker: f64,
    pub lower_whisker: f64,
    pub outliers: Vec<f64>,
}

/// Linear interpolation between closest ranks, at position (n-1)·p.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box-plot statistics with whiskers at the last samples inside
/// 1.5·IQR of the quartiles.
pub fn whisker_stats(values: &[f64]) -> Result<WhiskerStats, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |x: &&f64| **x >= lo_fence && **x <= hi_fence;
    Ok(WhiskerStats {
        median,
        q1,
        q3,
        iqr,
        upper_whisker: *v.iter().rev().find(inside).expect("the median lies inside the fences"),
        lower_whisker: *v.iter().find(inside).expect("the median lies inside the fences"),
        outliers: v.iter().copied().filter(|x| !inside(&x)).collect(),
    })
}
