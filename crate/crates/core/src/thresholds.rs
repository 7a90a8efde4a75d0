//! Operating-threshold grids shared by the box and mask metrics.

use serde::{Deserialize, Serialize};

/// How the operating thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdGrid {
    /// `n` evenly spaced thresholds `k / n` for `k = 0..n`.
    Uniform(usize),
    /// Every distinct score value that occurs in the evaluated maps.
    Exact,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid::Uniform(1000)
    }
}

/// Strictly ascending list of thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn uniform(n: usize) -> Self {
        Thresholds((0..n).map(|k| k as f64 / n as f64).collect())
    }

    /// Sorted, de-duplicated copy of `values`. Non-finite values are dropped.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        // -0.0 and 0.0 compare equal but survive dedup under total_cmp order
        v.dedup_by(|a, b| a == b);
        Thresholds(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest threshold `<= value`, i.e. the highest threshold
    /// at which `value` is still predicted as foreground.
    pub fn bucket(&self, value: f64) -> Option<usize> {
        self.0.partition_point(|&t| t <= value).checked_sub(1)
    }
}
