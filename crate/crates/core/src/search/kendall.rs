//! Kendall's tau-b between two score sequences.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KendallError {
    #[error("sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooShort(usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("every pair is tied in at least one input")]
    DegenerateAllTies,
}

/// Tie-corrected tau-b, `(C - D) / sqrt((n0 - n1)(n0 - n2))`, where `n1`
/// and `n2` count pairs tied in `a` and in `b`. Runs in O(n log n) (Knight's
/// algorithm: sort by `a`, count inversions of `b` with a merge sort).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, KendallError> {
    if a.len() != b.len() {
        return Err(KendallError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(KendallError::TooShort(n));
    }
    if let Some(i) = (0..n).find(|&i| !a[i].is_finite() || !b[i].is_finite()) {
        return Err(KendallError::NonFinite(i));
    }

    // adding 0.0 folds -0.0 into 0.0 so total_cmp agrees with ==
    let mut pairs: Vec<(f64, f64)> = a.iter().zip(b).map(|(&x, &y)| (x + 0.0, y + 0.0)).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n0 = (n * (n - 1) / 2) as i64;
    let tied_a = tied_pairs(pairs.iter().map(|p| p.0));
    let tied_both = tied_pairs_by(&pairs, |x, y| x == y);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut scratch = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut scratch) as i64;
    let tied_b = tied_pairs(ys.iter().copied());

    let concordant_minus_discordant = n0 - tied_a - tied_b + tied_both - 2 * swaps;
    let not_tied_a = n0 - tied_a;
    let not_tied_b = n0 - tied_b;
    if not_tied_a == 0 || not_tied_b == 0 {
        return Err(KendallError::DegenerateAllTies);
    }
    Ok(concordant_minus_discordant as f64 / ((not_tied_a as f64) * (not_tied_b as f64)).sqrt())
}

/// Pairs of equal values in an already sorted run.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> i64 {
    let mut total = 0i64;
    let mut run = 0i64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * (run - 1) / 2
}

fn tied_pairs_by<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> i64 {
    let mut total = 0i64;
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || !eq(&sorted[i], &sorted[start]) {
            let run = (i - start) as i64;
            total += run * (run - 1) / 2;
            start = i;
        }
    }
    total
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], scratch: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (sl, sr) = scratch.split_at_mut(mid);
        merge_count(left, sl) + merge_count(right, sr)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            scratch[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            scratch[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    scratch[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    scratch[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&scratch[..n]);
    swaps
}
