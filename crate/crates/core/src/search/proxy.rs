//! Class-stratified proxy subsets for cheaper search runs.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::annotations::{AnnotationError, SplitManifest};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Manifest(#[from] AnnotationError),
}

/// `ceil(fraction * n)`, ignoring float noise such as `0.1 * 30 = 3.0000000000000004`.
fn stratum_size(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Samples `ceil(fraction * n_c)` images without replacement from each
/// category `c`. Kept entries stay in manifest order.
pub fn proxy_manifest(
    manifest: &SplitManifest,
    fraction: f64,
    seed: u64,
) -> Result<SplitManifest, ProxyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ProxyError::InvalidFraction(fraction));
    }
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries().iter().enumerate() {
        by_category.entry(&e.category_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.len()];
    for members in by_category.values() {
        let k = stratum_size(fraction, members.len());
        for j in index::sample(&mut rng, members.len(), k) {
            keep[members[j]] = true;
        }
    }
    let entries = manifest
        .entries()
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(SplitManifest::new(manifest.split, entries)?)
}
