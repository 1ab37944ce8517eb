//! Radiomics descriptors of a masked region: shape, margin, first-order
//! intensity and GLCM texture, in a fixed 13-channel order.
//!
//! Intensities are expected in `[0, 1]`. All functions are pure.

pub mod glcm;
pub mod morphology;

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::glcm::{Quantized, DEFAULT_OFFSETS};

pub const NUM_FEATURES: usize = 13;

/// Canonical channel order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "circularity",
    "ellipticity",
    "aspect_ratio",
    "edge_sharpness",
    "edge_intensity",
    "entropy",
    "mean",
    "kurtosis",
    "glcm_contrast",
    "glcm_energy",
    "glcm_correlation",
    "glcm_entropy",
    "elongation2d",
];

pub const MIN_FOREGROUND: usize = 8;
pub const GLCM_LEVELS: usize = 32;
pub const HISTOGRAM_BINS: usize = 32;
/// Width of the outer ring used for the edge-intensity contrast.
pub const RING_WIDTH: usize = 5;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("mask has {count} foreground pixels, need at least {MIN_FOREGROUND}")]
    TooFewPixels { count: usize },
    #[error("image is {image:?} but mask is {mask:?}")]
    ShapeMismatch { image: (usize, usize), mask: (usize, usize) },
    #[error("no co-occurring pixel pairs inside the mask")]
    NoValidPairs,
    #[error("GLCM needs at least 2 gray levels, got {0}")]
    TooFewLevels(usize),
}

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width, "image buffer size");
        Self { height, width, pixels }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Self {
        assert_eq!(pixels.len(), height * width, "mask buffer size");
        Self { height, width, pixels }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.pixels[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&m| m).count()
    }
}

/// The 13 descriptors in [`FEATURE_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|&n| n == name).map(|i| self.0[i])
    }

    pub fn values(&self) -> &[f64; NUM_FEATURES] {
        &self.0
    }
}

/// Per-channel mean and standard deviation of training-split features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl StandardizationStats {
    /// Population statistics; `std` is floored at [`STD_FLOOR`].
    pub fn fit(samples: &[FeatureVector]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for s in samples {
            for k in 0..NUM_FEATURES {
                std[k] += (s.0[k] - mean[k]).powi(2);
            }
        }
        std.iter_mut().for_each(|v| *v = (*v / n).sqrt().max(STD_FLOOR));
        Self { mean, std }
    }

    pub fn identity() -> Self {
        Self { mean: [0.0; NUM_FEATURES], std: [1.0; NUM_FEATURES] }
    }

    pub fn standardize(&self, fv: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            out[k] = (fv.0[k] - self.mean[k]) / self.std[k].max(STD_FLOOR);
        }
        FeatureVector(out)
    }

    pub fn destandardize(&self, fv: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            out[k] = fv.0[k] * self.std[k].max(STD_FLOOR) + self.mean[k];
        }
        FeatureVector(out)
    }
}

/// Computes all 13 descriptors of `image` restricted to `mask`.
pub fn extract_features(image: &Image, mask: &Mask) -> Result<FeatureVector, FeatureError> {
    if image.dims() != mask.dims() {
        return Err(FeatureError::ShapeMismatch { image: image.dims(), mask: mask.dims() });
    }
    let count = mask.count();
    if count < MIN_FOREGROUND {
        return Err(FeatureError::TooFewPixels { count });
    }
    let shape = shape_descriptors(mask);
    let (edge_sharpness, edge_intensity) = margin_descriptors(image, mask);
    let inside: Vec<f64> = image.pixels.iter().zip(&mask.pixels).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let (mean, kurtosis) = mean_and_kurtosis(&inside);
    let entropy = histogram_entropy(&inside, HISTOGRAM_BINS);
    let q = Quantized::from_masked(&image.pixels, &mask.pixels, image.height, image.width, GLCM_LEVELS);
    let m = glcm::glcm(&q, &DEFAULT_OFFSETS)?;
    Ok(FeatureVector([
        shape.circularity,
        shape.ellipticity,
        shape.aspect_ratio,
        edge_sharpness,
        edge_intensity,
        entropy,
        mean,
        kurtosis,
        m.contrast(),
        m.energy(),
        m.correlation(),
        m.entropy(),
        shape.elongation,
    ]))
}

struct ShapeDescriptors {
    circularity: f64,
    ellipticity: f64,
    aspect_ratio: f64,
    elongation: f64,
}

fn shape_descriptors(mask: &Mask) -> ShapeDescriptors {
    let area = mask.count() as f64;
    let perimeter = morphology::corner_corrected_perimeter(mask);
    let (lam_min, lam_max) = morphology::coordinate_covariance_eigen(mask);
    let ratio = if lam_max > 0.0 { (lam_min / lam_max).max(0.0).sqrt() } else { 1.0 };
    let (r0, r1, c0, c1) = morphology::bounding_box(mask).expect("mask checked non-empty");
    let aspect_ratio = (r1 - r0 + 1) as f64 / (c1 - c0 + 1) as f64;
    ShapeDescriptors {
        circularity: 4.0 * PI * area / (perimeter * perimeter),
        ellipticity: ratio,
        aspect_ratio,
        elongation: ratio,
    }
}

/// (mean gradient magnitude on the boundary, |inside mean − ring mean|).
fn margin_descriptors(image: &Image, mask: &Mask) -> (f64, f64) {
    let (h, w) = image.dims();
    let boundary = morphology::boundary(mask);
    let mut grad_sum = 0.0;
    let mut n_boundary = 0usize;
    for r in 0..h {
        for c in 0..w {
            if !boundary[r * w + c] {
                continue;
            }
            // central differences with replicated borders
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gx = (image.at(r, cr) - image.at(r, cl)) / 2.0;
            let gy = (image.at(rd, c) - image.at(ru, c)) / 2.0;
            grad_sum += (gx * gx + gy * gy).sqrt();
            n_boundary += 1;
        }
    }
    let sharpness = if n_boundary > 0 { grad_sum / n_boundary as f64 } else { 0.0 };

    let dilated = morphology::dilate(mask, RING_WIDTH);
    let (mut in_sum, mut in_n, mut ring_sum, mut ring_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, &v) in image.pixels.iter().enumerate() {
        if mask.pixels[i] {
            in_sum += v;
            in_n += 1;
        } else if dilated[i] {
            ring_sum += v;
            ring_n += 1;
        }
    }
    let contrast = if ring_n == 0 { 0.0 } else { (in_sum / in_n as f64 - ring_sum / ring_n as f64).abs() };
    (sharpness, contrast)
}

/// Mean and Pearson (non-excess) kurtosis `m₄/σ⁴`; kurtosis is 0 when σ < 1e-8.
pub fn mean_and_kurtosis(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let sigma = m2.sqrt();
    let kurtosis = if sigma < 1e-8 { 0.0 } else { m4 / (m2 * m2) };
    (mean, kurtosis)
}

/// Shannon entropy (bits) of a `bins`-bin histogram over `[0, 1]`.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    -counts
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Header line for batch feature CSVs.
pub fn csv_header() -> String {
    let mut s = String::from("filename");
    for name in FEATURE_NAMES {
        s.push(',');
        s.push_str(name);
    }
    s
}

pub fn csv_row(filename: &str, fv: &FeatureVector) -> String {
    let mut s = filename.to_string();
    for v in fv.0 {
        let _ = write!(s, ",{v}");
    }
    s
}
