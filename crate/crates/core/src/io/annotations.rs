//! Split manifests, box annotations and ternary mask files.
//!
//! Manifest lines are `image_id,category_id,width,height`; box lines are
//! `image_id,x0,y0,x1,y1` with half-open coordinates. Both accept an
//! optional header line naming the columns. Masks are 8-bit grayscale PNG
//! or PGM files named `<image_id>.png` / `<image_id>.pgm` under a root
//! directory, with 0 = background, 255 = foreground, 128 = ignore.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::Bbox;
use crate::mask_metrics::{PixelLabel, TernaryMask};

pub const MANIFEST_HEADER: &str = "image_id,category_id,width,height";
pub const BOXES_HEADER: &str = "image_id,x0,y0,x1,y1";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: duplicate image id {image_id}")]
    DuplicateImage { path: String, image_id: String },
    #[error("box for {0} lies outside the image")]
    OutOfBounds(String),
    #[error("box for unknown image {0}")]
    UnknownImage(String),
    #[error("no mask file for {0}")]
    MissingMask(String),
    #[error("{image_id}: mask is {got_w}x{got_h}, manifest says {want_w}x{want_h}")]
    DimensionMismatch {
        image_id: String,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("{image_id}: mask value {value} at (x={x}, y={y}) is not 0, 128 or 255")]
    InvalidMaskValue {
        image_id: String,
        x: u32,
        y: u32,
        value: u8,
    },
    #[error("{image_id}: mask must be 8-bit grayscale")]
    NotGrayscale { image_id: String },
    #[error("{path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    TrainWeaksup,
    TrainFullsup,
    TestFullsup,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [
        SplitName::TrainWeaksup,
        SplitName::TrainFullsup,
        SplitName::TestFullsup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::TrainWeaksup => "train-weaksup",
            SplitName::TrainFullsup => "train-fullsup",
            SplitName::TestFullsup => "test-fullsup",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub category_id: String,
    pub width: u32,
    pub height: u32,
}

/// Ordered list of images in one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub split: SplitName,
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl SplitManifest {
    pub fn new(split: SplitName, entries: Vec<ManifestEntry>) -> Result<Self, AnnotationError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.width == 0 || e.height == 0 {
                return Err(AnnotationError::MalformedLine {
                    path: "<manifest>".into(),
                    line: i + 1,
                    reason: format!("{}: width and height must be >= 1", e.image_id),
                });
            }
            if index.insert(e.image_id.clone(), i).is_some() {
                return Err(AnnotationError::DuplicateImage {
                    path: "<manifest>".into(),
                    image_id: e.image_id.clone(),
                });
            }
        }
        Ok(Self {
            split,
            entries,
            index,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.index.get(image_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Images per category, in category order.
    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.category_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.image_id, e.category_id, e.width, e.height
            ));
        }
        out
    }
}

/// Non-empty, non-header lines with 1-based line numbers.
fn data_lines<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(move |&(i, l)| !l.is_empty() && !(i == 1 && l == header))
}

fn fields<const N: usize>(line: &str) -> Option<[&str; N]> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    parts.try_into().ok()
}

pub fn parse_manifest(
    text: &str,
    split: SplitName,
    path: &str,
) -> Result<SplitManifest, AnnotationError> {
    let malformed = |line: usize, reason: String| AnnotationError::MalformedLine {
        path: path.to_owned(),
        line,
        reason,
    };
    let mut entries = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in data_lines(text, MANIFEST_HEADER) {
        let [id, cat, w, h] = fields::<4>(line)
            .ok_or_else(|| malformed(n, "expected image_id,category_id,width,height".into()))?;
        if id.is_empty() || cat.is_empty() {
            return Err(malformed(n, "empty image or category id".into()));
        }
        let dim = |s: &str| {
            s.parse::<u32>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| malformed(n, format!("invalid dimension {s:?}")))
        };
        let (width, height) = (dim(w)?, dim(h)?);
        if seen.insert(id.to_owned(), n).is_some() {
            return Err(AnnotationError::DuplicateImage {
                path: path.to_owned(),
                image_id: id.to_owned(),
            });
        }
        entries.push(ManifestEntry {
            image_id: id.to_owned(),
            category_id: cat.to_owned(),
            width,
            height,
        });
    }
    SplitManifest::new(split, entries)
}

pub fn read_manifest(path: impl AsRef<Path>, split: SplitName) -> Result<SplitManifest, AnnotationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, split, &path.display().to_string())
}

/// Ground-truth boxes per image; every listed image has at least one box.
pub type BoxAnnotationSet = BTreeMap<String, Vec<Bbox>>;

pub fn parse_boxes(
    text: &str,
    manifest: &SplitManifest,
    path: &str,
) -> Result<BoxAnnotationSet, AnnotationError> {
    let mut set = BoxAnnotationSet::new();
    for (n, line) in data_lines(text, BOXES_HEADER) {
        let malformed = |reason: String| AnnotationError::MalformedLine {
            path: path.to_owned(),
            line: n,
            reason,
        };
        let [id, x0, y0, x1, y1] =
            fields::<5>(line).ok_or_else(|| malformed("expected image_id,x0,y0,x1,y1".into()))?;
        let coord = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| malformed(format!("invalid coordinate {s:?}")))
        };
        let b = Bbox::new(coord(x0)?, coord(y0)?, coord(x1)?, coord(y1)?)
            .ok_or_else(|| malformed("box needs x1 > x0 and y1 > y0".into()))?;
        let entry = manifest
            .get(id)
            .ok_or_else(|| AnnotationError::UnknownImage(id.to_owned()))?;
        if !b.fits_within(entry.width, entry.height) {
            return Err(AnnotationError::OutOfBounds(id.to_owned()));
        }
        set.entry(id.to_owned()).or_default().push(b);
    }
    Ok(set)
}

pub fn read_boxes(
    path: impl AsRef<Path>,
    manifest: &SplitManifest,
) -> Result<BoxAnnotationSet, AnnotationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_boxes(&text, manifest, &path.display().to_string())
}

pub fn boxes_to_text(set: &BoxAnnotationSet) -> String {
    let mut out = String::from(BOXES_HEADER);
    out.push('\n');
    for (id, boxes) in set {
        for b in boxes {
            out.push_str(&format!("{id},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
        }
    }
    out
}

pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_IGNORE: u8 = 128;
pub const MASK_FOREGROUND: u8 = 255;

/// Path of the mask file for `image_id`, preferring PNG over PGM.
pub fn mask_path(root: &Path, image_id: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| root.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Converts an 8-bit grayscale raster to labels.
pub fn decode_mask(
    image_id: &str,
    width: u32,
    height: u32,
    pixels: &[u8],
) -> Result<TernaryMask, AnnotationError> {
    let labels = pixels
        .iter()
        .enumerate()
        .map(|(i, &value)| match value {
            MASK_BACKGROUND => Ok(PixelLabel::Background),
            MASK_FOREGROUND => Ok(PixelLabel::Foreground),
            MASK_IGNORE => Ok(PixelLabel::Ignore),
            _ => Err(AnnotationError::InvalidMaskValue {
                image_id: image_id.to_owned(),
                x: i as u32 % width,
                y: i as u32 / width,
                value,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TernaryMask::new(height as usize, width as usize, labels).expect("raster size"))
}

pub fn encode_mask(mask: &TernaryMask) -> Vec<u8> {
    mask.labels
        .iter()
        .map(|l| match l {
            PixelLabel::Background => MASK_BACKGROUND,
            PixelLabel::Foreground => MASK_FOREGROUND,
            PixelLabel::Ignore => MASK_IGNORE,
        })
        .collect()
}

/// Loads and validates the mask for one manifest entry.
pub fn load_mask(root: &Path, entry: &ManifestEntry) -> Result<TernaryMask, AnnotationError> {
    let path =
        mask_path(root, &entry.image_id).ok_or_else(|| AnnotationError::MissingMask(entry.image_id.clone()))?;
    let img = image::open(&path).map_err(|source| AnnotationError::Image {
        path: path.display().to_string(),
        source,
    })?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(AnnotationError::NotGrayscale {
                image_id: entry.image_id.clone(),
            })
        }
    };
    if gray.width() != entry.width || gray.height() != entry.height {
        return Err(AnnotationError::DimensionMismatch {
            image_id: entry.image_id.clone(),
            want_w: entry.width,
            want_h: entry.height,
            got_w: gray.width(),
            got_h: gray.height(),
        });
    }
    decode_mask(&entry.image_id, gray.width(), gray.height(), gray.as_raw())
}

/// Writes `mask` as an 8-bit grayscale PNG.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &TernaryMask) -> Result<(), AnnotationError> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, encode_mask(mask))
        .expect("raster size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| AnnotationError::Image {
            path: path.display().to_string(),
            source,
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAnnotation {
    pub category_id: String,
    pub mask: TernaryMask,
}

pub type MaskAnnotationSet = BTreeMap<String, MaskAnnotation>;

/// Loads every mask listed in the manifest.
pub fn read_masks(
    root: impl AsRef<Path>,
    manifest: &SplitManifest,
) -> Result<MaskAnnotationSet, AnnotationError> {
    let root = root.as_ref();
    manifest
        .entries()
        .iter()
        .map(|e| {
            Ok((
                e.image_id.clone(),
                MaskAnnotation {
                    category_id: e.category_id.clone(),
                    mask: load_mask(root, e)?,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> SplitManifest {
        parse_manifest(
            "image_id,category_id,width,height\nimg1,cat,10,10\nimg2,dog,4,3\n",
            SplitName::TestFullsup,
            "m.csv",
        )
        .unwrap()
    }

    #[test]
    fn manifest_parsing() {
        let m = manifest();
        assert_eq!(m.len(), 2);
        assert_eq!(m.get("img2").unwrap().height, 3);
        assert_eq!(
            parse_manifest(&m.to_text(), SplitName::TestFullsup, "x").unwrap(),
            m
        );
        assert!(matches!(
            parse_manifest("a,c,1,1\na,c,2,2\n", SplitName::TrainFullsup, "x"),
            Err(AnnotationError::DuplicateImage { .. })
        ));
        assert!(matches!(
            parse_manifest("a,c,0,1\n", SplitName::TrainFullsup, "x"),
            Err(AnnotationError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn box_parsing() {
        let m = manifest();
        assert!(parse_boxes(BOXES_HEADER, &m, "b").unwrap().is_empty());
        let set = parse_boxes("image_id,x0,y0,x1,y1\nimg1,2,2,8,8\n", &m, "b").unwrap();
        assert_eq!(set["img1"], vec![Bbox::new(2, 2, 8, 8).unwrap()]);
        let set = parse_boxes("img1,0,0,1,1\nimg1,2,2,10,10\n", &m, "b").unwrap();
        assert_eq!(set["img1"].len(), 2);
        assert!(matches!(
            parse_boxes("image_id,x0,y0,x1,y1\nimg1,8,2,2,8\n", &m, "b"),
            Err(AnnotationError::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_boxes("img2,0,0,5,3\n", &m, "b"),
            Err(AnnotationError::OutOfBounds(_))
        ));
        assert!(matches!(
            parse_boxes("img9,0,0,1,1\n", &m, "b"),
            Err(AnnotationError::UnknownImage(_))
        ));
        assert!(matches!(
            parse_boxes("img1,0,0,1\n", &m, "b"),
            Err(AnnotationError::MalformedLine { .. })
        ));
        let set = parse_boxes("img1,2,2,8,8\nimg2,0,0,4,3\n", &m, "b").unwrap();
        assert_eq!(parse_boxes(&boxes_to_text(&set), &m, "b").unwrap(), set);
    }

    #[test]
    fn mask_decoding() {
        let all_bg = decode_mask("a", 2, 2, &[0; 4]).unwrap();
        assert!(all_bg.labels.iter().all(|&l| l == PixelLabel::Background));
        let mixed = decode_mask("a", 3, 1, &[0, 255, 128]).unwrap();
        assert_eq!(
            mixed.labels,
            vec![
                PixelLabel::Background,
                PixelLabel::Foreground,
                PixelLabel::Ignore
            ]
        );
        assert!(matches!(
            decode_mask("a", 2, 2, &[0, 0, 0, 7]),
            Err(AnnotationError::InvalidMaskValue { x: 1, y: 1, value: 7, .. })
        ));
    }

    #[test]
    fn mask_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest();
        let mask = decode_mask("img2", 4, 3, &[0, 255, 128, 0, 0, 0, 255, 255, 128, 0, 0, 0]).unwrap();
        write_mask_png(dir.path().join("img2.png"), &mask).unwrap();
        let loaded = load_mask(dir.path(), m.get("img2").unwrap()).unwrap();
        assert_eq!(loaded, mask);

        // PGM fallback
        let pgm = [b"P5\n4 3\n255\n".as_slice(), &encode_mask(&mask)].concat();
        let sub = dir.path().join("pgm");
        fs::create_dir(&sub).unwrap();
        fs::write(sub.join("img2.pgm"), pgm).unwrap();
        assert_eq!(load_mask(&sub, m.get("img2").unwrap()).unwrap(), mask);

        assert!(matches!(
            load_mask(dir.path(), m.get("img1").unwrap()),
            Err(AnnotationError::MissingMask(_))
        ));
        write_mask_png(dir.path().join("img1.png"), &mask).unwrap();
        assert!(matches!(
            load_mask(dir.path(), m.get("img1").unwrap()),
            Err(AnnotationError::DimensionMismatch { .. })
        ));
    }
}
