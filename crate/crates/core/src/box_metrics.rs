//! BoxAcc threshold sweeps, MaxBoxAccV2 and the legacy largest-component
//! MaxBoxAcc.
//!
//! A naive sweep thresholds and labels every map once per threshold. Here
//! each map is swept once: pixels are inserted into a union-find forest in
//! descending score order, so after the pixels of threshold `k` are in, the
//! forest holds exactly the components of `{s >= taus[k]}`. Only components
//! touched at step `k` change their box, so their IoU is recomputed and
//! pushed onto a lazily-invalidated max-heap; the heap top is the best IoU
//! at that threshold.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou_against, Bbox, ComponentForest};
use crate::scoremap::ScoreMap;
use crate::thresholds::Thresholds;

pub const DEFAULT_DELTAS: [f64; 3] = [0.3, 0.5, 0.7];
pub const LEGACY_DELTA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum BoxMetricError {
    #[error("{0}: ground-truth box set is empty")]
    EmptyGroundTruth(String),
    #[error("threshold grid is empty")]
    EmptyThresholds,
    #[error("IoU threshold set is empty")]
    EmptyDeltas,
    #[error("no images to evaluate")]
    NoImages,
}

/// Per-threshold best IoU for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSweep {
    /// Best IoU over all components, aligned with the thresholds.
    pub best_iou: Vec<f64>,
    /// IoU of the largest component only (legacy metric).
    pub largest_iou: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Reusable buffers for [`BoxSweeper::sweep`].
#[derive(Debug, Default)]
pub struct BoxSweeper {
    forest: Option<ComponentForest>,
    pixels: usize,
    version: Vec<u32>,
    marked: Vec<u32>,
    order: Vec<u32>,
    starts: Vec<usize>,
    touched: Vec<usize>,
    by_iou: BinaryHeap<(OrdF64, u32, u32)>,
    by_area: BinaryHeap<((u64, Reverse<u32>), OrdF64, u32, u32)>,
}

impl BoxSweeper {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, n: usize, k: usize) {
        if self.pixels != n || self.forest.is_none() {
            self.forest = Some(ComponentForest::new(n));
            self.version = vec![0; n];
            self.marked = vec![u32::MAX; n];
            self.pixels = n;
        } else {
            self.forest.as_mut().unwrap().reset();
            self.version.fill(0);
            self.marked.fill(u32::MAX);
        }
        self.order.clear();
        self.starts.clear();
        self.starts.resize(k + 1, 0);
        self.by_iou.clear();
        self.by_area.clear();
    }

    /// Sweeps one map against its ground-truth boxes. Degenerate maps
    /// predict nothing at any threshold.
    pub fn sweep(
        &mut self,
        map: &ScoreMap,
        ground_truth: &[Bbox],
        taus: &Thresholds,
    ) -> Result<ImageSweep, BoxMetricError> {
        if ground_truth.is_empty() {
            return Err(BoxMetricError::EmptyGroundTruth(map.image_id().to_owned()));
        }
        let k = taus.len();
        let mut out = ImageSweep {
            best_iou: vec![0.0; k],
            largest_iou: vec![0.0; k],
        };
        if map.is_degenerate() || k == 0 {
            return Ok(out);
        }
        let (h, w) = (map.height(), map.width());
        let n = h * w;
        self.prepare(n, k);

        // counting sort of pixels by bucket, bucket k-1 first
        let buckets: Vec<Option<usize>> = map.values().iter().map(|&v| taus.bucket(v)).collect();
        for b in buckets.iter().flatten() {
            self.starts[k - 1 - b + 1] += 1;
        }
        for i in 1..=k {
            self.starts[i] += self.starts[i - 1];
        }
        let active = self.starts[k];
        self.order.resize(active, 0);
        let mut cursor = self.starts.clone();
        for (p, b) in buckets.iter().enumerate() {
            if let Some(b) = b {
                let slot = &mut cursor[k - 1 - b];
                self.order[*slot] = p as u32;
                *slot += 1;
            }
        }

        let forest = self.forest.as_mut().unwrap();
        for step in 0..k {
            let tau_index = k - 1 - step;
            let (lo, hi) = (self.starts[step], self.starts[step + 1]);
            if lo < hi {
                self.touched.clear();
                for &p in &self.order[lo..hi] {
                    forest.insert_pixel(p as usize, w, h);
                    self.touched.push(p as usize);
                }
                for &p in &self.touched {
                    let root = forest.find(p);
                    if self.marked[root] == step as u32 {
                        continue;
                    }
                    self.marked[root] = step as u32;
                    self.version[root] += 1;
                    let comp = forest.component(root);
                    let iou = OrdF64(iou_against(&comp.bbox, ground_truth));
                    let ver = self.version[root];
                    self.by_iou.push((iou, root as u32, ver));
                    self.by_area.push((
                        (comp.area, Reverse(comp.first_pixel as u32)),
                        iou,
                        root as u32,
                        ver,
                    ));
                }
            }
            let live = |forest: &ComponentForest, r: u32, v: u32, version: &[u32]| {
                forest.is_root(r as usize) && version[r as usize] == v
            };
            while let Some(&(_, r, v)) = self.by_iou.peek() {
                if live(forest, r, v, &self.version) {
                    break;
                }
                self.by_iou.pop();
            }
            while let Some(&(_, _, r, v)) = self.by_area.peek() {
                if live(forest, r, v, &self.version) {
                    break;
                }
                self.by_area.pop();
            }
            if let Some(&(iou, ..)) = self.by_iou.peek() {
                out.best_iou[tau_index] = iou.0;
            }
            if let Some(&(_, iou, ..)) = self.by_area.peek() {
                out.largest_iou[tau_index] = iou.0;
            }
        }
        Ok(out)
    }
}

/// Integer hit counts per (delta, threshold); merging is an exact sum so
/// results never depend on evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxAccumulator {
    pub taus: Thresholds,
    pub deltas: Vec<f64>,
    pub hits: Vec<Vec<u64>>,
    pub legacy_delta: f64,
    pub legacy_hits: Vec<u64>,
    pub n_images: u64,
    pub n_degenerate: u64,
}

impl BoxAccumulator {
    pub fn new(taus: Thresholds, deltas: &[f64], legacy_delta: f64) -> Self {
        let k = taus.len();
        Self {
            taus,
            deltas: deltas.to_vec(),
            hits: vec![vec![0; k]; deltas.len()],
            legacy_delta,
            legacy_hits: vec![0; k],
            n_images: 0,
            n_degenerate: 0,
        }
    }

    pub fn add(&mut self, sweep: &ImageSweep, degenerate: bool) {
        for (d, &delta) in self.deltas.iter().enumerate() {
            for (hit, &iou) in self.hits[d].iter_mut().zip(&sweep.best_iou) {
                *hit += u64::from(iou >= delta);
            }
        }
        for (hit, &iou) in self.legacy_hits.iter_mut().zip(&sweep.largest_iou) {
            *hit += u64::from(iou >= self.legacy_delta);
        }
        self.n_images += 1;
        self.n_degenerate += u64::from(degenerate);
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.legacy_hits
            .iter_mut()
            .zip(&other.legacy_hits)
            .for_each(|(x, y)| *x += y);
        self.n_images += other.n_images;
        self.n_degenerate += other.n_degenerate;
        self
    }

    pub fn curve(&self) -> BoxAccCurve {
        let n = self.n_images.max(1) as f64;
        BoxAccCurve {
            taus: self.taus.as_slice().to_vec(),
            per_delta: self
                .deltas
                .iter()
                .zip(&self.hits)
                .map(|(&delta, hits)| DeltaCurve {
                    delta,
                    accuracy: hits.iter().map(|&h| h as f64 / n).collect(),
                })
                .collect(),
            n_images: self.n_images,
        }
    }

    pub fn legacy_curve(&self) -> BoxAccCurve {
        let n = self.n_images.max(1) as f64;
        BoxAccCurve {
            taus: self.taus.as_slice().to_vec(),
            per_delta: vec![DeltaCurve {
                delta: self.legacy_delta,
                accuracy: self.legacy_hits.iter().map(|&h| h as f64 / n).collect(),
            }],
            n_images: self.n_images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCurve {
    pub delta: f64,
    pub accuracy: Vec<f64>,
}

/// BoxAcc as a function of the operating threshold, one curve per IoU
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAccCurve {
    pub taus: Vec<f64>,
    pub per_delta: Vec<DeltaCurve>,
    pub n_images: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBest {
    pub delta: f64,
    pub best_tau: f64,
    pub best_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxBoxAcc {
    pub score: f64,
    pub per_delta: Vec<DeltaBest>,
}

fn sweep_all<I>(
    items: I,
    taus: &Thresholds,
    deltas: &[f64],
    legacy_delta: f64,
) -> Result<BoxAccumulator, BoxMetricError>
where
    I: IntoIterator<Item = (ScoreMap, Vec<Bbox>)>,
{
    if taus.is_empty() {
        return Err(BoxMetricError::EmptyThresholds);
    }
    if deltas.is_empty() {
        return Err(BoxMetricError::EmptyDeltas);
    }
    let items: Vec<(ScoreMap, Vec<Bbox>)> = items.into_iter().collect();
    if items.is_empty() {
        return Err(BoxMetricError::NoImages);
    }
    items
        .par_iter()
        .map_init(BoxSweeper::new, |sweeper, (map, gt)| {
            let sweep = sweeper.sweep(map, gt, taus)?;
            let mut acc = BoxAccumulator::new(taus.clone(), deltas, legacy_delta);
            acc.add(&sweep, map.is_degenerate());
            Ok(acc)
        })
        .try_reduce_with(|a, b| Ok(a.merge(b)))
        .expect("non-empty")
}

/// `BoxAcc(tau, delta)` over all images for every threshold and IoU
/// threshold.
pub fn box_acc_sweep<I>(
    items: I,
    taus: &Thresholds,
    deltas: &[f64],
) -> Result<BoxAccCurve, BoxMetricError>
where
    I: IntoIterator<Item = (ScoreMap, Vec<Bbox>)>,
{
    Ok(sweep_all(items, taus, deltas, LEGACY_DELTA)?.curve())
}

/// Best threshold per IoU threshold (smallest tau on ties) and the mean of
/// the per-delta maxima.
pub fn max_box_acc_v2(curve: &BoxAccCurve) -> MaxBoxAcc {
    let per_delta: Vec<DeltaBest> = curve
        .per_delta
        .iter()
        .map(|dc| {
            let mut best = DeltaBest {
                delta: dc.delta,
                best_tau: curve.taus.first().copied().unwrap_or(0.0),
                best_acc: f64::NEG_INFINITY,
            };
            for (&tau, &acc) in curve.taus.iter().zip(&dc.accuracy) {
                if acc > best.best_acc {
                    best.best_acc = acc;
                    best.best_tau = tau;
                }
            }
            if best.best_acc == f64::NEG_INFINITY {
                best.best_acc = 0.0;
            }
            best
        })
        .collect();
    let score = if per_delta.is_empty() {
        0.0
    } else {
        per_delta.iter().map(|d| d.best_acc).sum::<f64>() / per_delta.len() as f64
    };
    MaxBoxAcc { score, per_delta }
}

/// Legacy MaxBoxAcc: only the largest component's box is compared, at a
/// single IoU threshold.
pub fn max_box_acc_v1<I>(items: I, taus: &Thresholds, delta: f64) -> Result<f64, BoxMetricError>
where
    I: IntoIterator<Item = (ScoreMap, Vec<Bbox>)>,
{
    let acc = sweep_all(items, taus, &[delta], delta)?;
    Ok(max_box_acc_v2(&acc.legacy_curve()).score)
}
