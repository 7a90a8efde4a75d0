#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsol_eval::io::annotations::{
    boxes_to_text, write_mask_png, BoxAnnotationSet, ManifestEntry, SplitManifest, SplitName,
};
use wsol_eval::io::scorepack::write_scorepack;
use wsol_eval::mask_metrics::{PixelLabel, TernaryMask};
use wsol_eval::scoremap::gaussian_blur;
use wsol_eval::{Bbox, ScoreMap};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wsol-eval"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// One elliptical object per image. Pixels within 85% of the ellipse
/// radius are foreground, the rest of the ellipse is an ignore band.
pub struct Sample {
    pub entry: ManifestEntry,
    pub mask: TernaryMask,
    pub bbox: Bbox,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub boxes: PathBuf,
    pub masks: PathBuf,
    pub samples: Vec<Sample>,
}

/// Every image has a shorter side of 64 so center-Gaussian maps are
/// computed without rounding.
const SHAPES: [(usize, usize); 5] = [(64, 64), (64, 96), (96, 64), (64, 128), (80, 64)];

pub fn make_samples(prefix: &str, categories: usize, per_category: usize, seed: u64) -> Vec<Sample> {
    make_samples_with_shapes(prefix, categories, per_category, seed, &SHAPES)
}

pub fn make_samples_with_shapes(
    prefix: &str,
    categories: usize,
    per_category: usize,
    seed: u64,
    shapes: &[(usize, usize)],
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..categories {
        for i in 0..per_category {
            let (h, w) = shapes[rng.random_range(0..shapes.len())];
            let ry = rng.random_range(8.0..h as f64 / 4.0);
            let rx = rng.random_range(8.0..w as f64 / 4.0);
            let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
            let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
            let mut labels = Vec::with_capacity(h * w);
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for r in 0..h {
                for col in 0..w {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (col as f64 + 0.5 - cx) / rx;
                    let d = (dx * dx + dy * dy).sqrt();
                    labels.push(if d < 0.85 {
                        x0 = x0.min(col as u32);
                        y0 = y0.min(r as u32);
                        x1 = x1.max(col as u32 + 1);
                        y1 = y1.max(r as u32 + 1);
                        PixelLabel::Foreground
                    } else if d < 1.0 {
                        PixelLabel::Ignore
                    } else {
                        PixelLabel::Background
                    });
                }
            }
            out.push(Sample {
                entry: ManifestEntry {
                    image_id: format!("{prefix}c{c}_{i:03}"),
                    category_id: format!("cat{c}"),
                    width: w as u32,
                    height: h as u32,
                },
                mask: TernaryMask::new(h, w, labels).unwrap(),
                bbox: Bbox::new(x0, y0, x1, y1).unwrap(),
            });
        }
    }
    out
}

pub fn manifest_of(samples: &[Sample], split: SplitName) -> SplitManifest {
    SplitManifest::new(split, samples.iter().map(|s| s.entry.clone()).collect()).unwrap()
}

pub fn boxes_of(samples: &[Sample]) -> BoxAnnotationSet {
    samples
        .iter()
        .map(|s| (s.entry.image_id.clone(), vec![s.bbox]))
        .collect()
}

pub fn write_dataset(root: &Path, samples: Vec<Sample>, split: SplitName) -> Dataset {
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let manifest = root.join("manifest.txt");
    std::fs::write(&manifest, manifest_of(&samples, split).to_text()).unwrap();
    let boxes = root.join("boxes.txt");
    std::fs::write(&boxes, boxes_to_text(&boxes_of(&samples))).unwrap();
    for s in &samples {
        write_mask_png(root.join("masks").join(format!("{}.png", s.entry.image_id)), &s.mask).unwrap();
    }
    Dataset {
        root: root.to_owned(),
        manifest,
        boxes,
        masks: root.join("masks"),
        samples,
    }
}

/// Foreground indicator smoothed with a Gaussian of `sigma` pixels.
pub fn blurred_indicator(s: &Sample, sigma: f64) -> ScoreMap {
    let values = s
        .mask
        .labels
        .iter()
        .map(|&l| if l == PixelLabel::Foreground { 1.0 } else { 0.0 })
        .collect();
    let map = ScoreMap::new(&s.entry.image_id, s.mask.height, s.mask.width, values).unwrap();
    gaussian_blur(&map, sigma).unwrap()
}

pub fn write_blurred_pack(path: &Path, samples: &[Sample], sigma: f64) {
    let maps: Vec<ScoreMap> = samples.iter().map(|s| blurred_indicator(s, sigma)).collect();
    write_scorepack(&maps, path).unwrap();
}

pub fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn schema_validator(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema").join(name);
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

pub fn assert_valid(validator: &jsonschema::Validator, doc: &serde_json::Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}
