//! Machine-readable metric reports.
//!
//! The JSON layout is described by `schema/metric-report.schema.json` at
//! the repository root. Reports carry no timestamps or paths unless a stamp
//! is supplied, so identical inputs give byte-identical output.

use serde::{Deserialize, Serialize};

use crate::box_metrics::DeltaBest;
use crate::eval::{EvalOptions, Normalization, PrPooling, StageOrder, Task};
use crate::mask_metrics::PixelCounts;
use crate::thresholds::ThresholdGrid;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub task: Task,
    pub config: ReportConfig,
    /// MaxBoxAccV2 for boxes, mPxAP for masks.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<BoxReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskReport>,
    pub counts: ReportCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<String>,
}

impl MetricReport {
    pub fn new(
        task: Task,
        config: ReportConfig,
        score: f64,
        boxes: Option<BoxReport>,
        masks: Option<MaskReport>,
        counts: ReportCounts,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            toolkit_version: TOOLKIT_VERSION.to_owned(),
            task,
            config,
            score,
            boxes,
            masks,
            counts,
            stamp: None,
        }
    }

    pub fn with_stamp(mut self, stamp: impl Into<String>) -> Self {
        self.stamp = Some(stamp.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub normalization: Normalization,
    pub grid: ThresholdGrid,
    /// Thresholds actually swept (the largest per-category count for exact
    /// mask sweeps).
    pub n_thresholds: usize,
    pub deltas: Vec<f64>,
    pub stage_order: StageOrder,
    pub blur_sigma: Option<f64>,
    pub pr_pooling: PrPooling,
    pub px_acc_tau: f64,
    pub pool_all_categories: bool,
}

impl ReportConfig {
    pub fn from_options(options: &EvalOptions, n_thresholds: usize) -> Self {
        Self {
            normalization: options.normalization,
            grid: options.grid,
            n_thresholds,
            deltas: options.deltas.clone(),
            stage_order: options.stage_order,
            blur_sigma: options.blur_sigma,
            pr_pooling: options.pr_pooling,
            px_acc_tau: options.px_acc_tau,
            pool_all_categories: options.pool_all_categories,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub per_delta: Vec<DeltaBest>,
    pub max_box_acc_v2: f64,
    pub max_box_acc_v1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub per_category: Vec<CategoryReport>,
    pub m_px_ap: f64,
    pub px_acc: PxAccReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category_id: String,
    pub px_ap: f64,
    pub n_images: u64,
    pub n_thresholds: usize,
    pub pixels: PixelCounts,
    /// Per-image pooling only: images skipped for lack of foreground.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_without_foreground: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PxAccReport {
    pub tau: f64,
    /// `null` when every pixel was ignored.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub n_images: u64,
    pub n_degenerate: u64,
    pub n_pixels: u64,
}
