//! Axis-aligned boxes, IoU, and connected-component box extraction.

use serde::{Deserialize, Serialize};

use crate::scoremap::BinaryMask;

/// Half-open pixel box `[x0, x1) × [y0, y1)`; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Bbox {
    /// Returns `None` unless `x1 > x0` and `y1 > y0`.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        (x1 > x0 && y1 > y0).then_some(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &Bbox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        u64::from(w) * u64::from(h)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Intersection over union of pixel areas.
pub fn box_iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("ground-truth box set is empty")]
pub struct EmptyGroundTruth;

/// Best IoU over all (estimate, ground truth) pairs; `0.0` when there are no
/// estimates.
pub fn best_iou(estimated: &[Bbox], ground_truth: &[Bbox]) -> Result<f64, EmptyGroundTruth> {
    if ground_truth.is_empty() {
        return Err(EmptyGroundTruth);
    }
    Ok(estimated
        .iter()
        .flat_map(|e| ground_truth.iter().map(move |g| box_iou(e, g)))
        .fold(0.0, f64::max))
}

/// Best IoU of a single box against a ground-truth set.
pub(crate) fn iou_against(b: &Bbox, ground_truth: &[Bbox]) -> f64 {
    ground_truth
        .iter()
        .map(|g| box_iou(b, g))
        .fold(0.0, f64::max)
}

/// A connected component's bounding box together with its pixel count and
/// first pixel in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub bbox: Bbox,
    pub area: u64,
    pub first_pixel: usize,
}

/// Union-find over pixel indices that carries component statistics at the
/// roots.
#[derive(Debug)]
pub(crate) struct ComponentForest {
    parent: Vec<u32>,
    size: Vec<u32>,
    // bbox fields are inclusive maxima while building
    min_x: Vec<u32>,
    min_y: Vec<u32>,
    max_x: Vec<u32>,
    max_y: Vec<u32>,
    first: Vec<u32>,
}

pub(crate) const NONE: u32 = u32::MAX;

impl ComponentForest {
    pub fn new(n: usize) -> Self {
        Self {
            parent: vec![NONE; n],
            size: vec![0; n],
            min_x: vec![0; n],
            min_y: vec![0; n],
            max_x: vec![0; n],
            max_y: vec![0; n],
            first: vec![0; n],
        }
    }

    pub fn reset(&mut self) {
        self.parent.fill(NONE);
    }

    pub fn is_active(&self, p: usize) -> bool {
        self.parent[p] != NONE
    }

    pub fn activate(&mut self, p: usize, x: u32, y: u32) {
        self.parent[p] = p as u32;
        self.size[p] = 1;
        self.min_x[p] = x;
        self.max_x[p] = x;
        self.min_y[p] = y;
        self.max_y[p] = y;
        self.first[p] = p as u32;
    }

    pub fn find(&mut self, mut p: usize) -> usize {
        let mut root = p;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        while self.parent[p] as usize != root {
            let next = self.parent[p] as usize;
            self.parent[p] = root as u32;
            p = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`, returning the surviving root.
    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        self.min_x[ra] = self.min_x[ra].min(self.min_x[rb]);
        self.min_y[ra] = self.min_y[ra].min(self.min_y[rb]);
        self.max_x[ra] = self.max_x[ra].max(self.max_x[rb]);
        self.max_y[ra] = self.max_y[ra].max(self.max_y[rb]);
        self.first[ra] = self.first[ra].min(self.first[rb]);
        ra
    }

    pub fn is_root(&self, p: usize) -> bool {
        self.parent[p] as usize == p
    }

    pub fn component(&self, root: usize) -> Component {
        Component {
            bbox: Bbox {
                x0: self.min_x[root],
                y0: self.min_y[root],
                x1: self.max_x[root] + 1,
                y1: self.max_y[root] + 1,
            },
            area: u64::from(self.size[root]),
            first_pixel: self.first[root] as usize,
        }
    }

    /// Activates pixel `p` and joins it with its already-active
    /// 8-neighbours. Returns the root of the resulting component.
    pub fn insert_pixel(&mut self, p: usize, width: usize, height: usize) -> usize {
        let (y, x) = (p / width, p % width);
        self.activate(p, x as u32, y as u32);
        let mut root = p;
        let y_lo = y.saturating_sub(1);
        let y_hi = (y + 1).min(height - 1);
        let x_lo = x.saturating_sub(1);
        let x_hi = (x + 1).min(width - 1);
        for ny in y_lo..=y_hi {
            for nx in x_lo..=x_hi {
                let q = ny * width + nx;
                if q != p && self.is_active(q) {
                    root = self.union(root, q);
                }
            }
        }
        root
    }
}

/// Connected components of a mask under 8-connectivity, in raster order of
/// each component's first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut forest = ComponentForest::new(h * w);
    for (p, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        forest.insert_pixel(p, w, h);
    }
    let mut comps: Vec<Component> = (0..h * w)
        .filter(|&p| mask.bits[p] && forest.is_root(p))
        .map(|p| forest.component(p))
        .collect();
    comps.sort_by_key(|c| c.first_pixel);
    comps
}

/// Tightest box around each 8-connected component of `mask`.
pub fn extract_boxes(mask: &BinaryMask) -> Vec<Bbox> {
    connected_components(mask)
        .into_iter()
        .map(|c| c.bbox)
        .collect()
}

/// The component with the largest area; ties go to the component whose
/// first raster pixel comes earliest.
pub fn largest_component(mask: &BinaryMask) -> Option<Component> {
    connected_components(mask)
        .into_iter()
        .min_by_key(|c| (std::cmp::Reverse(c.area), c.first_pixel))
}
