//! End-to-end evaluation of a score-map stream against a split's ground
//! truth.
//!
//! Maps are read sequentially in batches; each batch is preprocessed and
//! scored in parallel on the current rayon pool. All accumulation is exact
//! integer counting (or sorted before summing), so a report never depends
//! on the number of worker threads.

use std::borrow::Cow;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box_metrics::{
    max_box_acc_v2, BoxAccCurve, BoxAccumulator, BoxMetricError, BoxSweeper, DEFAULT_DELTAS,
    LEGACY_DELTA,
};
use crate::io::annotations::{load_mask, AnnotationError, BoxAnnotationSet, MaskAnnotationSet, SplitManifest};
use crate::io::scorepack::{ScorepackError, ScorepackReader};
use crate::mask_metrics::{
    m_px_ap, px_ap, MaskMetricError, PixelCounts, PixelLabel, PrAccumulator, PrCurve, PxAccCounter,
    TernaryMask,
};
use crate::report::{
    BoxReport, CategoryReport, MaskReport, MetricReport, PxAccReport, ReportConfig, ReportCounts,
};
use crate::scoremap::{
    gaussian_blur, normalize_max, normalize_minmax, resize_bilinear, ScoreMap, ScoreMapError,
};
use crate::thresholds::{ThresholdGrid, Thresholds};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score pack: {0}")]
    Scorepack(#[from] ScorepackError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    ScoreMap(#[from] ScoreMapError),
    #[error(transparent)]
    BoxMetric(#[from] BoxMetricError),
    #[error("{context}: {source}")]
    MaskMetric {
        context: String,
        source: MaskMetricError,
    },
    #[error("score map for {0} is not in the manifest")]
    UnknownImage(String),
    #[error("no ground truth for {0}")]
    MissingGroundTruth(String),
    #[error("{} manifest image(s) have no score map, e.g. {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingScoreMaps(Vec<String>),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

impl EvalError {
    /// True when the failure is about reading files rather than about their
    /// contents.
    pub fn is_io(&self) -> bool {
        match self {
            EvalError::Scorepack(ScorepackError::Io(_)) => true,
            EvalError::Annotation(AnnotationError::Io { .. } | AnnotationError::MissingMask(_)) => {
                true
            }
            EvalError::Annotation(AnnotationError::Image { source, .. }) => {
                matches!(source, image::ImageError::IoError(_))
            }
            _ => false,
        }
    }

    fn mask(context: impl Into<String>, source: MaskMetricError) -> Self {
        EvalError::MaskMetric {
            context: context.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Boxes,
    Masks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Minmax,
    Max,
    None,
}

/// Whether score maps are normalized before or after being resized to the
/// ground-truth resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    NormalizeThenResize,
    ResizeThenNormalize,
}

/// Pixel pooling for PxAP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrPooling {
    /// One PR curve over all pixels of a category.
    Category,
    /// One PR curve per image; a category's PxAP is the mean over its
    /// images that contain foreground.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub normalization: Normalization,
    pub grid: ThresholdGrid,
    pub deltas: Vec<f64>,
    pub stage_order: StageOrder,
    /// Gaussian blur applied last, at ground-truth resolution.
    pub blur_sigma: Option<f64>,
    pub pr_pooling: PrPooling,
    pub px_acc_tau: f64,
    /// Pool every mask image into one category (for curve output).
    pub pool_all_categories: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::Minmax,
            grid: ThresholdGrid::default(),
            deltas: DEFAULT_DELTAS.to_vec(),
            stage_order: StageOrder::NormalizeThenResize,
            blur_sigma: None,
            pr_pooling: PrPooling::Category,
            px_acc_tau: 0.5,
            pool_all_categories: false,
            batch_size: 64,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<(), EvalError> {
        if let ThresholdGrid::Uniform(0) = self.grid {
            return Err(EvalError::InvalidOption("threshold grid size must be >= 1".into()));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(EvalError::InvalidOption("IoU thresholds must lie in [0, 1]".into()));
        }
        if let Some(s) = self.blur_sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(EvalError::ScoreMap(ScoreMapError::InvalidSigma(s)));
            }
        }
        if !self.px_acc_tau.is_finite() {
            return Err(EvalError::InvalidOption("PxAcc threshold must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(EvalError::InvalidOption("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

fn normalize(map: &ScoreMap, how: Normalization) -> Result<ScoreMap, ScoreMapError> {
    match how {
        Normalization::Minmax => Ok(normalize_minmax(map)),
        Normalization::Max => normalize_max(map),
        Normalization::None => Ok(map.clone()),
    }
}

/// Normalizes, resizes to `height × width`, then optionally blurs.
pub fn preprocess(
    map: &ScoreMap,
    height: usize,
    width: usize,
    options: &EvalOptions,
) -> Result<ScoreMap, ScoreMapError> {
    let out = match options.stage_order {
        StageOrder::NormalizeThenResize => {
            resize_bilinear(&normalize(map, options.normalization)?, height, width)?
        }
        StageOrder::ResizeThenNormalize => {
            normalize(&resize_bilinear(map, height, width)?, options.normalization)?
        }
    };
    match options.blur_sigma {
        Some(sigma) => gaussian_blur(&out, sigma),
        None => Ok(out),
    }
}

pub type MapIter<'a> = Box<dyn Iterator<Item = Result<ScoreMap, EvalError>> + 'a>;

/// Something that can be streamed more than once (exact-threshold
/// evaluation makes two passes).
pub trait MapSource: Sync {
    fn open(&self) -> Result<MapIter<'_>, EvalError>;
}

/// A scorepack on disk.
#[derive(Debug, Clone)]
pub struct PackFile(pub PathBuf);

impl MapSource for PackFile {
    fn open(&self) -> Result<MapIter<'_>, EvalError> {
        let reader = ScorepackReader::open(&self.0)?;
        Ok(Box::new(reader.map(|r| r.map_err(EvalError::from))))
    }
}

impl MapSource for [ScoreMap] {
    fn open(&self) -> Result<MapIter<'_>, EvalError> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}

impl MapSource for Vec<ScoreMap> {
    fn open(&self) -> Result<MapIter<'_>, EvalError> {
        self.as_slice().open()
    }
}

/// Maps produced on demand from an index.
pub struct GeneratedMaps<F> {
    pub count: usize,
    pub generate: F,
}

impl<F: Fn(usize) -> ScoreMap + Sync> MapSource for GeneratedMaps<F> {
    fn open(&self) -> Result<MapIter<'_>, EvalError> {
        Ok(Box::new((0..self.count).map(|i| Ok((self.generate)(i)))))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// `<root>/<image_id>.png` or `.pgm`, loaded on demand.
    Dir(&'a Path),
    Memory(&'a MaskAnnotationSet),
}

impl MaskSource<'_> {
    fn get(&self, manifest: &SplitManifest, image_id: &str) -> Result<Cow<'_, TernaryMask>, EvalError> {
        let entry = manifest
            .get(image_id)
            .ok_or_else(|| EvalError::UnknownImage(image_id.to_owned()))?;
        match self {
            MaskSource::Dir(root) => Ok(Cow::Owned(load_mask(root, entry)?)),
            MaskSource::Memory(set) => set
                .get(image_id)
                .map(|a| Cow::Borrowed(&a.mask))
                .ok_or_else(|| EvalError::MissingGroundTruth(image_id.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    Boxes(&'a BoxAnnotationSet),
    Masks(MaskSource<'a>),
}

impl GroundTruth<'_> {
    pub fn task(&self) -> Task {
        match self {
            GroundTruth::Boxes(_) => Task::Boxes,
            GroundTruth::Masks(_) => Task::Masks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CategoryAcc {
    Pooled(PrAccumulator),
    PerImage {
        aps: Vec<(String, f64)>,
        without_fg: u64,
        counts: PixelCounts,
        n_images: u64,
        n_thresholds: usize,
    },
}

impl CategoryAcc {
    fn per_image(image_id: String, pr: &PrAccumulator) -> Result<Self, EvalError> {
        let (aps, without_fg, n_thresholds) = match pr.curve() {
            Ok(curve) => {
                let n = curve.taus.len();
                (vec![(image_id, px_ap(&curve))], 0, n)
            }
            Err(MaskMetricError::NoForegroundPixels) => (Vec::new(), 1, 0),
            Err(e) => return Err(EvalError::mask(image_id, e)),
        };
        Ok(CategoryAcc::PerImage {
            aps,
            without_fg,
            counts: pr.counts(),
            n_images: 1,
            n_thresholds,
        })
    }

    fn absorb_image(&mut self, other: CategoryAcc) {
        if let (
            CategoryAcc::PerImage {
                aps,
                without_fg,
                counts,
                n_images,
                n_thresholds,
            },
            CategoryAcc::PerImage {
                aps: a2,
                without_fg: w2,
                counts: c2,
                n_images: n2,
                n_thresholds: t2,
            },
        ) = (self, other)
        {
            aps.extend(a2);
            *without_fg += w2;
            *counts += c2;
            *n_images += n2;
            *n_thresholds = (*n_thresholds).max(t2);
        }
    }
}

/// Accumulated state of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub task: Task,
    pub options: EvalOptions,
    boxes: Option<BoxAccumulator>,
    categories: BTreeMap<String, CategoryAcc>,
    px_acc: PxAccCounter,
    n_images: u64,
    n_degenerate: u64,
    n_pixels: u64,
}

enum Contribution {
    Box {
        sweep: crate::box_metrics::ImageSweep,
        degenerate: bool,
    },
    Mask {
        category: String,
        image_id: String,
        pr: PrAccumulator,
        px_acc: PxAccCounter,
        degenerate: bool,
    },
}

fn category_key(options: &EvalOptions, category: &str) -> String {
    if options.pool_all_categories {
        "all".to_owned()
    } else {
        category.to_owned()
    }
}

/// Thresholds for an exact sweep: distinct preprocessed values, globally
/// for boxes and per category (non-ignored pixels only) for masks.
fn exact_thresholds(
    source: &dyn MapSource,
    gt: GroundTruth<'_>,
    manifest: &SplitManifest,
    options: &EvalOptions,
) -> Result<BTreeMap<String, Thresholds>, EvalError> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut iter = source.open()?;
    loop {
        let batch: Vec<ScoreMap> = iter
            .by_ref()
            .take(options.batch_size)
            .collect::<Result<_, _>>()?;
        if batch.is_empty() {
            break;
        }
        let parts: Vec<(String, Vec<f64>)> = batch
            .par_iter()
            .map(|raw| {
                let entry = manifest
                    .get(raw.image_id())
                    .ok_or_else(|| EvalError::UnknownImage(raw.image_id().to_owned()))?;
                let map = preprocess(raw, entry.height as usize, entry.width as usize, options)?;
                if map.is_degenerate() {
                    return Ok((String::new(), Vec::new()));
                }
                match gt {
                    GroundTruth::Boxes(_) => Ok((String::new(), map.into_values())),
                    GroundTruth::Masks(masks) => {
                        let mask = masks.get(manifest, raw.image_id())?;
                        check_mask_dims(&map, &mask)?;
                        let v = map
                            .values()
                            .iter()
                            .zip(&mask.labels)
                            .filter(|(_, &l)| l != PixelLabel::Ignore)
                            .map(|(&v, _)| v)
                            .collect();
                        Ok((category_key(options, &entry.category_id), v))
                    }
                }
            })
            .collect::<Result<_, EvalError>>()?;
        for (key, v) in parts {
            let slot = values.entry(key).or_default();
            slot.extend(v);
            slot.sort_unstable_by(f64::total_cmp);
            slot.dedup();
        }
    }
    Ok(values
        .into_iter()
        .map(|(k, v)| (k, Thresholds::from_values(v)))
        .collect())
}

fn check_mask_dims(map: &ScoreMap, mask: &TernaryMask) -> Result<(), EvalError> {
    if map.height() != mask.height || map.width() != mask.width {
        return Err(EvalError::mask(
            map.image_id(),
            MaskMetricError::DimensionMismatch {
                image_id: map.image_id().to_owned(),
                map_h: map.height(),
                map_w: map.width(),
                mask_h: mask.height,
                mask_w: mask.width,
            },
        ));
    }
    Ok(())
}

/// Scores every map of `source` against `gt`. Every manifest image must
/// have exactly one map, and every map must belong to the manifest.
pub fn evaluate(
    source: &dyn MapSource,
    gt: GroundTruth<'_>,
    manifest: &SplitManifest,
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    options.validate()?;
    let task = gt.task();
    let exact = matches!(options.grid, ThresholdGrid::Exact);
    let per_image_exact = exact && task == Task::Masks && options.pr_pooling == PrPooling::Image;
    let exact_taus = if exact && !per_image_exact {
        Some(exact_thresholds(source, gt, manifest, options)?)
    } else {
        None
    };
    let uniform = match options.grid {
        ThresholdGrid::Uniform(n) => Thresholds::uniform(n),
        ThresholdGrid::Exact => Thresholds::from_values([]),
    };
    let empty = Thresholds::from_values([]);
    let taus_for = |key: &str| -> &Thresholds {
        match &exact_taus {
            Some(t) => t.get(key).unwrap_or(&empty),
            None => &uniform,
        }
    };

    let mut eval = Evaluation {
        task,
        options: options.clone(),
        boxes: match gt {
            GroundTruth::Boxes(_) => Some(BoxAccumulator::new(
                taus_for("").clone(),
                &options.deltas,
                LEGACY_DELTA,
            )),
            GroundTruth::Masks(_) => None,
        },
        categories: BTreeMap::new(),
        px_acc: PxAccCounter::default(),
        n_images: 0,
        n_degenerate: 0,
        n_pixels: 0,
    };

    let mut seen = HashSet::with_capacity(manifest.len());
    let mut iter = source.open()?;
    loop {
        let batch: Vec<ScoreMap> = iter
            .by_ref()
            .take(options.batch_size)
            .collect::<Result<_, _>>()?;
        if batch.is_empty() {
            break;
        }
        for m in &batch {
            if manifest.get(m.image_id()).is_none() {
                return Err(EvalError::UnknownImage(m.image_id().to_owned()));
            }
            seen.insert(m.image_id().to_owned());
        }
        let contributions: Vec<Contribution> = batch
            .par_iter()
            .map_init(BoxSweeper::new, |sweeper, raw| {
                let entry = manifest.get(raw.image_id()).expect("checked above");
                let map = preprocess(raw, entry.height as usize, entry.width as usize, options)?;
                match gt {
                    GroundTruth::Boxes(set) => {
                        let boxes = set
                            .get(raw.image_id())
                            .ok_or_else(|| EvalError::MissingGroundTruth(raw.image_id().to_owned()))?;
                        let sweep = sweeper.sweep(&map, boxes, taus_for(""))?;
                        Ok(Contribution::Box {
                            sweep,
                            degenerate: map.is_degenerate(),
                        })
                    }
                    GroundTruth::Masks(masks) => {
                        let mask = masks.get(manifest, raw.image_id())?;
                        check_mask_dims(&map, &mask)?;
                        let key = category_key(options, &entry.category_id);
                        let taus = if per_image_exact {
                            crate::mask_metrics::exact_mask_thresholds([(&map, mask.as_ref())])
                        } else {
                            taus_for(&key).clone()
                        };
                        let mut pr = PrAccumulator::new(taus);
                        pr.add(&map, &mask)
                            .map_err(|e| EvalError::mask(raw.image_id(), e))?;
                        let mut px_acc = PxAccCounter::default();
                        px_acc
                            .add(&map, &mask, options.px_acc_tau)
                            .map_err(|e| EvalError::mask(raw.image_id(), e))?;
                        Ok(Contribution::Mask {
                            category: key,
                            image_id: raw.image_id().to_owned(),
                            pr,
                            px_acc,
                            degenerate: map.is_degenerate(),
                        })
                    }
                }
            })
            .collect::<Result<_, EvalError>>()?;
        for (c, raw) in contributions.into_iter().zip(&batch) {
            eval.n_images += 1;
            let entry = manifest.get(raw.image_id()).expect("checked above");
            eval.n_pixels += u64::from(entry.width) * u64::from(entry.height);
            eval.absorb(c)?;
        }
    }

    let mut missing: Vec<String> = manifest
        .entries()
        .iter()
        .filter(|e| !seen.contains(&e.image_id))
        .map(|e| e.image_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(EvalError::MissingScoreMaps(missing));
    }
    Ok(eval)
}

impl Evaluation {
    fn absorb(&mut self, c: Contribution) -> Result<(), EvalError> {
        match c {
            Contribution::Box { sweep, degenerate } => {
                self.boxes
                    .as_mut()
                    .expect("box task")
                    .add(&sweep, degenerate);
                self.n_degenerate += u64::from(degenerate);
            }
            Contribution::Mask {
                category,
                image_id,
                pr,
                px_acc,
                degenerate,
            } => {
                self.n_degenerate += u64::from(degenerate);
                self.px_acc = self.px_acc.merge(px_acc);
                match self.categories.entry(category) {
                    Entry::Vacant(slot) => {
                        let initial = match self.options.pr_pooling {
                            PrPooling::Category => CategoryAcc::Pooled(pr),
                            PrPooling::Image => CategoryAcc::per_image(image_id, &pr)?,
                        };
                        slot.insert(initial);
                    }
                    Entry::Occupied(mut slot) => match slot.get_mut() {
                        CategoryAcc::Pooled(acc) => {
                            let merged = acc.clone().merge(pr);
                            *acc = merged;
                        }
                        CategoryAcc::PerImage { .. } => {
                            let next = CategoryAcc::per_image(image_id, &pr)?;
                            slot.get_mut().absorb_image(next);
                        }
                    },
                }
            }
        }
        Ok(())
    }

    pub fn n_images(&self) -> u64 {
        self.n_images
    }

    pub fn n_degenerate(&self) -> u64 {
        self.n_degenerate
    }

    /// BoxAcc curves (box task only).
    pub fn box_curve(&self) -> Option<BoxAccCurve> {
        self.boxes.as_ref().map(BoxAccumulator::curve)
    }

    /// Pooled PR curve of one category (category pooling only).
    pub fn pr_curve(&self, category: &str) -> Option<Result<PrCurve, EvalError>> {
        match self.categories.get(category)? {
            CategoryAcc::Pooled(acc) => Some(acc.curve().map_err(|e| EvalError::mask(category, e))),
            CategoryAcc::PerImage { .. } => None,
        }
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn report(&self) -> Result<MetricReport, EvalError> {
        let options = &self.options;
        let mut n_thresholds = match options.grid {
            ThresholdGrid::Uniform(n) => n,
            ThresholdGrid::Exact => 0,
        };
        let (score, boxes, masks) = match self.task {
            Task::Boxes => {
                let acc = self.boxes.as_ref().expect("box task");
                if acc.n_images == 0 {
                    return Err(BoxMetricError::NoImages.into());
                }
                n_thresholds = acc.taus.len();
                let v2 = max_box_acc_v2(&acc.curve());
                let v1 = max_box_acc_v2(&acc.legacy_curve()).score;
                (
                    v2.score,
                    Some(BoxReport {
                        per_delta: v2.per_delta,
                        max_box_acc_v2: v2.score,
                        max_box_acc_v1: v1,
                    }),
                    None,
                )
            }
            Task::Masks => {
                let mut per_category = Vec::new();
                let mut aps = BTreeMap::new();
                for (cat, acc) in &self.categories {
                    let report = match acc {
                        CategoryAcc::Pooled(acc) => {
                            let curve = acc.curve().map_err(|e| EvalError::mask(cat.clone(), e))?;
                            CategoryReport {
                                category_id: cat.clone(),
                                px_ap: px_ap(&curve),
                                n_images: acc.n_images(),
                                n_thresholds: curve.taus.len(),
                                pixels: acc.counts(),
                                images_without_foreground: None,
                            }
                        }
                        CategoryAcc::PerImage {
                            aps: per_image,
                            without_fg,
                            counts,
                            n_images,
                            n_thresholds,
                        } => {
                            if per_image.is_empty() {
                                return Err(EvalError::mask(cat.clone(), MaskMetricError::NoForegroundPixels));
                            }
                            let mut sorted = per_image.clone();
                            sorted.sort_by(|a, b| a.0.cmp(&b.0));
                            let mean = sorted.iter().map(|(_, ap)| ap).sum::<f64>() / sorted.len() as f64;
                            CategoryReport {
                                category_id: cat.clone(),
                                px_ap: mean,
                                n_images: *n_images,
                                n_thresholds: *n_thresholds,
                                pixels: *counts,
                                images_without_foreground: Some(*without_fg),
                            }
                        }
                    };
                    aps.insert(cat.clone(), report.px_ap);
                    per_category.push(report);
                }
                let m = m_px_ap(&aps).map_err(|e| EvalError::mask("categories", e))?;
                if matches!(options.grid, ThresholdGrid::Exact) {
                    n_thresholds = per_category.iter().map(|c| c.n_thresholds).max().unwrap_or(0);
                }
                (
                    m,
                    None,
                    Some(MaskReport {
                        per_category,
                        m_px_ap: m,
                        px_acc: PxAccReport {
                            tau: options.px_acc_tau,
                            value: self.px_acc.value().ok(),
                        },
                    }),
                )
            }
        };
        Ok(MetricReport::new(
            self.task,
            ReportConfig::from_options(options, n_thresholds),
            score,
            boxes,
            masks,
            ReportCounts {
                n_images: self.n_images,
                n_degenerate: self.n_degenerate,
                n_pixels: self.n_pixels,
            },
        ))
    }
}
