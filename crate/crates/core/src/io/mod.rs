//! On-disk formats: scorepacks, manifests, box files, mask images.

pub mod annotations;
pub mod scorepack;
pub mod splits;

pub use annotations::{
    load_mask, read_boxes, read_manifest, read_masks, AnnotationError, BoxAnnotationSet,
    ManifestEntry, MaskAnnotation, MaskAnnotationSet, SplitManifest, SplitName,
};
pub use scorepack::{read_scorepack, write_scorepack, ScorepackError, ScorepackReader, ScorepackWriter};
pub use splits::{validate_splits, AnnotationCoverage, ValidationReport};
