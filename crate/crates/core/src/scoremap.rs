//! Score maps and the per-map transforms applied before scoring.
//!
//! A [`ScoreMap`] is a dense `height × width` grid of finite reals stored
//! row-major. Every transform here is a pure function returning a new map.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreMapError {
    #[error("{id}: invalid dimensions {height}x{width}")]
    InvalidDimensions {
        id: String,
        height: usize,
        width: usize,
    },
    #[error("{id}: expected {expected} values, got {got}")]
    LengthMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("{id}: non-finite value at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("{id}: negative value at index {index}, max normalization needs non-negative scores")]
    NegativeValues { id: String, index: usize },
    #[error("invalid sigma {0}, must be > 0")]
    InvalidSigma(f64),
}

/// A per-image score map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    image_id: String,
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
    degenerate: bool,
}

impl ScoreMap {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, ScoreMapError> {
        let image_id = image_id.into();
        if height == 0 || width == 0 {
            return Err(ScoreMapError::InvalidDimensions {
                id: image_id,
                height,
                width,
            });
        }
        let expected = height
            .checked_mul(width)
            .ok_or_else(|| ScoreMapError::InvalidDimensions {
                id: image_id.clone(),
                height,
                width,
            })?;
        if values.len() != expected {
            return Err(ScoreMapError::LengthMismatch {
                id: image_id,
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScoreMapError::NonFinite {
                id: image_id,
                index,
            });
        }
        Ok(Self {
            image_id,
            height,
            width,
            values,
            normalized: false,
            degenerate: false,
        })
    }

    /// Builds a map from a generator over `(row, col)`.
    pub fn from_fn(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ScoreMapError> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self::new(image_id, height, width, values)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// True once a normalization has been applied (values lie in `[0, 1]`).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// True when normalization met a constant map and emitted all zeros.
    /// Downstream metrics treat such maps as predicting nothing.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Marks the map as normalized without touching values. Fails unless
    /// every value already lies in `[0, 1]`.
    pub fn assume_normalized(mut self) -> Option<Self> {
        if self.values.iter().all(|v| (0.0..=1.0).contains(v)) {
            self.normalized = true;
            Some(self)
        } else {
            None
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn with_values(&self, height: usize, width: usize, values: Vec<f64>) -> Self {
        Self {
            image_id: self.image_id.clone(),
            height,
            width,
            values,
            normalized: self.normalized,
            degenerate: self.degenerate,
        }
    }

    /// Applies `f` to every value. The result loses the `normalized` flag;
    /// callers re-assert it with [`ScoreMap::assume_normalized`].
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self, ScoreMapError> {
        let mut out = Self::new(
            self.image_id.clone(),
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )?;
        out.degenerate = self.degenerate;
        Ok(out)
    }
}

/// Row-major boolean mask, the superlevel set of a score map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == height * width).then_some(Self {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `(v - min) / (max - min)`. Constant maps come back as all zeros with the
/// degenerate flag set.
pub fn normalize_minmax(map: &ScoreMap) -> ScoreMap {
    let (lo, hi) = map.min_max();
    let mut out = if hi > lo {
        let range = hi - lo;
        let values = map
            .values
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect();
        let mut out = map.with_values(map.height, map.width, values);
        out.degenerate = false;
        out
    } else {
        let mut out = map.with_values(map.height, map.width, vec![0.0; map.values.len()]);
        out.degenerate = true;
        out
    };
    out.normalized = true;
    out
}

/// `v / max` for non-negative maps. An all-zero map is degenerate.
pub fn normalize_max(map: &ScoreMap) -> Result<ScoreMap, ScoreMapError> {
    if let Some(index) = map.values.iter().position(|&v| v < 0.0) {
        return Err(ScoreMapError::NegativeValues {
            id: map.image_id.clone(),
            index,
        });
    }
    let (_, hi) = map.min_max();
    let mut out = if hi > 0.0 {
        let values = map.values.iter().map(|&v| (v / hi).min(1.0)).collect();
        let mut out = map.with_values(map.height, map.width, values);
        out.degenerate = false;
        out
    } else {
        let mut out = map.with_values(map.height, map.width, vec![0.0; map.values.len()]);
        out.degenerate = true;
        out
    };
    out.normalized = true;
    Ok(out)
}

/// Bilinear resize with half-pixel centers: output pixel `i` samples the
/// source at `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize_bilinear(
    map: &ScoreMap,
    out_h: usize,
    out_w: usize,
) -> Result<ScoreMap, ScoreMapError> {
    if out_h == 0 || out_w == 0 {
        return Err(ScoreMapError::InvalidDimensions {
            id: map.image_id.clone(),
            height: out_h,
            width: out_w,
        });
    }
    if out_h == map.height && out_w == map.width {
        return Ok(map.clone());
    }
    let rows = sample_positions(map.height, out_h);
    let cols = sample_positions(map.width, out_w);
    let src = &map.values;
    let w = map.width;
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        let top = &src[r0 * w..(r0 + 1) * w];
        let bottom = &src[r1 * w..(r1 + 1) * w];
        for &(c0, c1, fc) in &cols {
            let t = top[c0] + (top[c1] - top[c0]) * fc;
            let b = bottom[c0] + (bottom[c1] - bottom[c0]) * fc;
            values.push(t + (b - t) * fr);
        }
    }
    Ok(map.with_values(out_h, out_w, values))
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Unit-sum 1-D Gaussian kernel truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, ScoreMapError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ScoreMapError::InvalidSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / denom).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    Ok(kernel)
}

/// Separable Gaussian blur with replicate-edge padding.
pub fn gaussian_blur(map: &ScoreMap, sigma: f64) -> Result<ScoreMap, ScoreMapError> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (map.height, map.width);
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;

    let mut horizontal = vec![0.0; h * w];
    for i in 0..h {
        let row = &map.values[i * w..(i + 1) * w];
        for j in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                acc += weight * row[clamp(j as isize + k as isize - radius, w)];
            }
            horizontal[i * w + j] = acc;
        }
    }
    let mut values = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                acc += weight * horizontal[clamp(i as isize + k as isize - radius, h) * w + j];
            }
            values[i * w + j] = acc;
        }
    }
    Ok(map.with_values(h, w, values))
}

/// Superlevel set `{value >= tau}`.
pub fn threshold(map: &ScoreMap, tau: f64) -> BinaryMask {
    BinaryMask {
        height: map.height,
        width: map.width,
        bits: map.values.iter().map(|&v| v >= tau).collect(),
    }
}

/// Isotropic Gaussian centered on the image. `sigma` is measured in units
/// of half the shorter image side.
pub fn center_gaussian(
    image_id: impl Into<String>,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<ScoreMap, ScoreMapError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ScoreMapError::InvalidSigma(sigma));
    }
    let half = height.min(width) as f64 / 2.0;
    let ci = (height as f64 - 1.0) / 2.0;
    let cj = (width as f64 - 1.0) / 2.0;
    let denom = 2.0 * sigma * sigma;
    let mut map = ScoreMap::from_fn(image_id, height, width, |i, j| {
        let u = (i as f64 - ci) / half;
        let v = (j as f64 - cj) / half;
        (-(u * u + v * v) / denom).exp()
    })?;
    map.normalized = true;
    Ok(map)
}
