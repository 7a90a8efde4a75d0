//! Checks for the three-split protocol: disjoint image sets, category
//! coverage, and annotation coverage of the fully supervised splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::annotations::{SplitManifest, SplitName};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOverlap {
    pub a: SplitName,
    pub b: SplitName,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingAnnotations {
    pub split: SplitName,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub overlaps: Vec<SplitOverlap>,
    pub category_counts: BTreeMap<SplitName, BTreeMap<String, usize>>,
    pub missing_annotations: Vec<MissingAnnotations>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    /// No hard violations. Warnings do not count.
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty() && self.missing_annotations.is_empty()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .overlaps
            .iter()
            .map(|o| {
                format!(
                    "{} and {} share {} image(s): {}",
                    o.a,
                    o.b,
                    o.image_ids.len(),
                    o.image_ids.join(", ")
                )
            })
            .collect();
        out.extend(self.missing_annotations.iter().map(|m| {
            format!(
                "{}: {} image(s) without annotations: {}",
                m.split,
                m.image_ids.len(),
                m.image_ids.join(", ")
            )
        }));
        out
    }
}

/// Ids that have annotation data, per split.
pub type AnnotationCoverage = BTreeMap<SplitName, HashSet<String>>;

/// Validates `[train-weaksup, train-fullsup, test-fullsup]`. Splits absent
/// from `coverage` are not checked for annotations.
pub fn validate_splits(
    manifests: [&SplitManifest; 3],
    coverage: &AnnotationCoverage,
) -> ValidationReport {
    let mut overlaps = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (manifests[i], manifests[j]);
            let shared: BTreeSet<String> = a
                .entries()
                .iter()
                .filter(|e| b.get(&e.image_id).is_some())
                .map(|e| e.image_id.clone())
                .collect();
            if !shared.is_empty() {
                overlaps.push(SplitOverlap {
                    a: a.split,
                    b: b.split,
                    image_ids: shared.into_iter().collect(),
                });
            }
        }
    }

    let category_counts: BTreeMap<SplitName, BTreeMap<String, usize>> = manifests
        .iter()
        .map(|m| (m.split, m.category_counts()))
        .collect();

    let mut warnings = Vec::new();
    let train_cats: BTreeSet<&String> = category_counts[&manifests[0].split].keys().collect();
    for m in &manifests[1..] {
        for cat in category_counts[&m.split].keys() {
            if !train_cats.contains(cat) {
                warnings.push(format!(
                    "category {cat} appears in {} but not in {}",
                    m.split, manifests[0].split
                ));
            }
        }
    }

    let mut missing_annotations = Vec::new();
    for m in manifests {
        if let Some(ids) = coverage.get(&m.split) {
            let missing: Vec<String> = m
                .entries()
                .iter()
                .filter(|e| !ids.contains(&e.image_id))
                .map(|e| e.image_id.clone())
                .collect();
            if !missing.is_empty() {
                missing_annotations.push(MissingAnnotations {
                    split: m.split,
                    image_ids: missing,
                });
            }
        }
    }

    ValidationReport {
        overlaps,
        category_counts,
        missing_annotations,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::annotations::parse_manifest;

    fn m(split: SplitName, text: &str) -> SplitManifest {
        parse_manifest(text, split, "t").unwrap()
    }

    #[test]
    fn disjoint_is_clean() {
        let a = m(SplitName::TrainWeaksup, "a,c1,2,2\nb,c2,2,2\n");
        let b = m(SplitName::TrainFullsup, "c,c1,2,2\n");
        let c = m(SplitName::TestFullsup, "d,c2,2,2\n");
        let r = validate_splits([&a, &b, &c], &AnnotationCoverage::new());
        assert!(r.is_clean());
        assert!(r.warnings.is_empty());
        assert_eq!(r.category_counts[&SplitName::TrainWeaksup]["c1"], 1);
    }

    #[test]
    fn shared_id_is_a_violation() {
        let a = m(SplitName::TrainWeaksup, "a,c1,2,2\n");
        let b = m(SplitName::TrainFullsup, "x,c1,2,2\n");
        let c = m(SplitName::TestFullsup, "x,c1,2,2\ny,c1,2,2\n");
        let r = validate_splits([&a, &b, &c], &AnnotationCoverage::new());
        assert!(!r.is_clean());
        assert_eq!(
            r.overlaps,
            vec![SplitOverlap {
                a: SplitName::TrainFullsup,
                b: SplitName::TestFullsup,
                image_ids: vec!["x".into()]
            }]
        );
    }

    #[test]
    fn unseen_test_category_warns() {
        let a = m(SplitName::TrainWeaksup, "a,c1,2,2\n");
        let b = m(SplitName::TrainFullsup, "b,c1,2,2\n");
        let c = m(SplitName::TestFullsup, "c,c1,2,2\nd,c3,2,2\n");
        let r = validate_splits([&a, &b, &c], &AnnotationCoverage::new());
        assert!(r.is_clean());
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("c3"));
    }

    #[test]
    fn missing_annotations_reported() {
        let a = m(SplitName::TrainWeaksup, "a,c1,2,2\n");
        let b = m(SplitName::TrainFullsup, "b,c1,2,2\n");
        let c = m(SplitName::TestFullsup, "c,c1,2,2\nd,c1,2,2\n");
        let cov: AnnotationCoverage = [(SplitName::TestFullsup, ["c".to_string()].into())].into();
        let r = validate_splits([&a, &b, &c], &cov);
        assert!(!r.is_clean());
        assert_eq!(r.missing_annotations[0].image_ids, vec!["d".to_string()]);
    }
}
