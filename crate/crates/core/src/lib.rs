//! Evaluation toolkit for weakly-supervised object localization.
//!
//! Score maps are scored against boxes with MaxBoxAccV2 (and the legacy
//! largest-component MaxBoxAcc) and against ternary masks with PxAP /
//! mPxAP. The [`search`] module runs fixed-budget random hyperparameter
//! search around an external trainer process.

pub mod box_metrics;
pub mod boxes;
pub mod eval;
pub mod io;
pub mod mask_metrics;
pub mod report;
pub mod scoremap;
pub mod search;
pub mod thresholds;

pub use boxes::{best_iou, box_iou, extract_boxes, Bbox};
pub use scoremap::{BinaryMask, ScoreMap, ScoreMapError};
pub use thresholds::{ThresholdGrid, Thresholds};
pub use eval::{evaluate, EvalError, EvalOptions, GroundTruth, MaskSource, Task};
pub use report::MetricReport;
