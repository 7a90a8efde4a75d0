//! Pixel precision/recall, PxAP, mPxAP and PxAcc against ternary masks.
//!
//! Pixels labelled [`PixelLabel::Ignore`] are dropped from every count.
//! Counts are pooled over all images fed to one accumulator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoremap::ScoreMap;
use crate::thresholds::Thresholds;

#[derive(Debug, Error, PartialEq)]
pub enum MaskMetricError {
    #[error("no foreground pixels in the pooled ground truth")]
    NoForegroundPixels,
    #[error("every pixel is ignored")]
    NoPixels,
    #[error("category set is empty")]
    EmptyCategorySet,
    #[error("{image_id}: score map is {map_h}x{map_w} but mask is {mask_h}x{mask_w}")]
    DimensionMismatch {
        image_id: String,
        map_h: usize,
        map_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("threshold grid is empty")]
    EmptyThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelLabel {
    Background,
    Foreground,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<PixelLabel>,
}

impl TernaryMask {
    pub fn new(height: usize, width: usize, labels: Vec<PixelLabel>) -> Option<Self> {
        (labels.len() == height * width).then_some(Self {
            height,
            width,
            labels,
        })
    }

    pub fn counts(&self) -> PixelCounts {
        let mut c = PixelCounts::default();
        for l in &self.labels {
            match l {
                PixelLabel::Foreground => c.n_fg += 1,
                PixelLabel::Background => c.n_bg += 1,
                PixelLabel::Ignore => c.n_ignore += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub n_fg: u64,
    pub n_bg: u64,
    pub n_ignore: u64,
}

impl std::ops::AddAssign for PixelCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.n_fg += rhs.n_fg;
        self.n_bg += rhs.n_bg;
        self.n_ignore += rhs.n_ignore;
    }
}

/// Pixel precision and recall aligned with ascending thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub taus: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub counts: PixelCounts,
}

fn check_dims(map: &ScoreMap, mask: &TernaryMask) -> Result<(), MaskMetricError> {
    if map.height() != mask.height || map.width() != mask.width {
        return Err(MaskMetricError::DimensionMismatch {
            image_id: map.image_id().to_owned(),
            map_h: map.height(),
            map_w: map.width(),
            mask_h: mask.height,
            mask_w: mask.width,
        });
    }
    Ok(())
}

/// Foreground/background histograms over threshold buckets. Bucket `k`
/// holds pixels predicted at `taus[k]` but not at `taus[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrAccumulator {
    taus: Thresholds,
    fg: Vec<u64>,
    bg: Vec<u64>,
    counts: PixelCounts,
    n_images: u64,
    n_degenerate: u64,
}

impl PrAccumulator {
    pub fn new(taus: Thresholds) -> Self {
        let k = taus.len();
        Self {
            taus,
            fg: vec![0; k],
            bg: vec![0; k],
            counts: PixelCounts::default(),
            n_images: 0,
            n_degenerate: 0,
        }
    }

    pub fn add(&mut self, map: &ScoreMap, mask: &TernaryMask) -> Result<(), MaskMetricError> {
        check_dims(map, mask)?;
        let degenerate = map.is_degenerate();
        for (&v, &label) in map.values().iter().zip(&mask.labels) {
            let hist = match label {
                PixelLabel::Ignore => {
                    self.counts.n_ignore += 1;
                    continue;
                }
                PixelLabel::Foreground => {
                    self.counts.n_fg += 1;
                    &mut self.fg
                }
                PixelLabel::Background => {
                    self.counts.n_bg += 1;
                    &mut self.bg
                }
            };
            if degenerate {
                continue;
            }
            if let Some(b) = self.taus.bucket(v) {
                hist[b] += 1;
            }
        }
        self.n_images += 1;
        self.n_degenerate += u64::from(degenerate);
        Ok(())
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.fg.iter_mut().zip(&other.fg).for_each(|(a, b)| *a += b);
        self.bg.iter_mut().zip(&other.bg).for_each(|(a, b)| *a += b);
        self.counts += other.counts;
        self.n_images += other.n_images;
        self.n_degenerate += other.n_degenerate;
        self
    }

    pub fn counts(&self) -> PixelCounts {
        self.counts
    }

    pub fn n_images(&self) -> u64 {
        self.n_images
    }

    pub fn n_degenerate(&self) -> u64 {
        self.n_degenerate
    }

    pub fn curve(&self) -> Result<PrCurve, MaskMetricError> {
        if self.counts.n_fg == 0 {
            return Err(MaskMetricError::NoForegroundPixels);
        }
        let k = self.taus.len();
        let mut precision = vec![0.0; k];
        let mut recall = vec![0.0; k];
        let (mut tp, mut fp) = (0u64, 0u64);
        for i in (0..k).rev() {
            tp += self.fg[i];
            fp += self.bg[i];
            precision[i] = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            recall[i] = tp as f64 / self.counts.n_fg as f64;
        }
        Ok(PrCurve {
            taus: self.taus.as_slice().to_vec(),
            precision,
            recall,
            counts: self.counts,
        })
    }
}

/// Pooled pixel precision-recall curve over all `(map, mask)` pairs.
pub fn pr_curve<'a, I>(pairs: I, taus: &Thresholds) -> Result<PrCurve, MaskMetricError>
where
    I: IntoIterator<Item = (&'a ScoreMap, &'a TernaryMask)>,
{
    if taus.is_empty() {
        return Err(MaskMetricError::EmptyThresholds);
    }
    let mut acc = PrAccumulator::new(taus.clone());
    for (map, mask) in pairs {
        acc.add(map, mask)?;
    }
    acc.curve()
}

/// Distinct scores over the non-ignored pixels of non-degenerate maps.
pub fn exact_mask_thresholds<'a, I>(pairs: I) -> Thresholds
where
    I: IntoIterator<Item = (&'a ScoreMap, &'a TernaryMask)>,
{
    let mut values = Vec::new();
    for (map, mask) in pairs {
        if map.is_degenerate() {
            continue;
        }
        values.extend(
            map.values()
                .iter()
                .zip(&mask.labels)
                .filter(|(_, &l)| l != PixelLabel::Ignore)
                .map(|(&v, _)| v),
        );
    }
    Thresholds::from_values(values)
}

/// Area under the PR curve by the rectangle rule, walking thresholds from
/// high to low with recall starting at 0.
pub fn px_ap(curve: &PrCurve) -> f64 {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&p, &r) in curve.precision.iter().zip(&curve.recall).rev() {
        ap += p * (r - prev_recall);
        prev_recall = r;
    }
    ap
}

/// Unweighted mean of per-category PxAP.
pub fn m_px_ap(per_category: &BTreeMap<String, f64>) -> Result<f64, MaskMetricError> {
    if per_category.is_empty() {
        return Err(MaskMetricError::EmptyCategorySet);
    }
    Ok(per_category.values().sum::<f64>() / per_category.len() as f64)
}

/// Counts for pixel accuracy at one fixed threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PxAccCounter {
    pub correct: u64,
    pub total: u64,
}

impl PxAccCounter {
    pub fn add(
        &mut self,
        map: &ScoreMap,
        mask: &TernaryMask,
        tau: f64,
    ) -> Result<(), MaskMetricError> {
        check_dims(map, mask)?;
        let degenerate = map.is_degenerate();
        for (&v, &label) in map.values().iter().zip(&mask.labels) {
            let truth = match label {
                PixelLabel::Ignore => continue,
                PixelLabel::Foreground => true,
                PixelLabel::Background => false,
            };
            let predicted = !degenerate && v >= tau;
            self.total += 1;
            self.correct += u64::from(predicted == truth);
        }
        Ok(())
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.correct += other.correct;
        self.total += other.total;
        self
    }

    pub fn value(&self) -> Result<f64, MaskMetricError> {
        if self.total == 0 {
            return Err(MaskMetricError::NoPixels);
        }
        Ok(self.correct as f64 / self.total as f64)
    }
}

/// Fraction of non-ignored pixels whose thresholded prediction matches the
/// mask.
pub fn px_acc<'a, I>(pairs: I, tau: f64) -> Result<f64, MaskMetricError>
where
    I: IntoIterator<Item = (&'a ScoreMap, &'a TernaryMask)>,
{
    let mut counter = PxAccCounter::default();
    for (map, mask) in pairs {
        counter.add(map, mask, tau)?;
    }
    counter.value()
}
