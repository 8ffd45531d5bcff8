//! Order statistics for latency summaries.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `q`-th percentile (0–100) of sorted data, linear interpolation between
/// closest ranks.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(alloc::format!("percentile {q} outside [0, 100]")));
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Result<Summary> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sample"));
        }
        let mut s: Vec<f64> = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Summary {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
            median: percentile_sorted(&s, 50.0)?,
            p95: percentile_sorted(&s, 95.0)?,
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}
