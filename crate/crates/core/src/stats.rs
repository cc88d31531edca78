//! Order statistics shared by the audit and evaluation reports.
//!
//! Quartiles everywhere use linear interpolation between closest ranks:
//! for sorted `x[0..n]` and probability `p`, the position is `h = (n - 1) p`
//! and the value is `x[floor(h)] + (h - floor(h)) (x[floor(h) + 1] - x[floor(h)])`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("cannot summarise an empty sample")]
    Empty,
    #[error("sample contains a non-finite value")]
    NonFinite,
}

/// Five-number summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuartileSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

/// Interpolated quantile of an already-sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

pub fn median(values: &[f64]) -> Result<f64, StatsError> {
    Ok(quantile_sorted(&sorted_finite(values)?, 0.5))
}

pub fn quartile_summary(values: &[f64]) -> Result<QuartileSummary, StatsError> {
    let sorted = sorted_finite(values)?;
    Ok(QuartileSummary {
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        n: sorted.len(),
    })
}

/// Summary over the defined entries of `values`; `None` when nothing is defined.
pub fn summarise_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<QuartileSummary> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    quartile_summary(&defined).ok()
}
