//! Gray-level co-occurrence matrices and the Haralick statistics used as
//! texture descriptors.

use super::FeatureError;

/// Marks pixels outside the region of interest in a [`Quantized`] image.
pub const BACKGROUND: u16 = u16::MAX;

/// Default displacement set `(d_row, d_col)`: right, down and both diagonals.
pub const DEFAULT_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// An image of gray levels in `0..n_levels`, with [`BACKGROUND`] outside the
/// region of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub height: usize,
    pub width: usize,
    pub n_levels: usize,
    pub levels: Vec<u16>,
}

impl Quantized {
    /// Min–max quantization of the masked pixels to `n_levels` bins; a
    /// constant region maps to level 0.
    pub fn from_masked(
        pixels: &[f64],
        mask: &[bool],
        height: usize,
        width: usize,
        n_levels: usize,
    ) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (&v, &m) in pixels.iter().zip(mask) {
            if m {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let range = hi - lo;
        let top = (n_levels - 1) as u16;
        let levels = pixels
            .iter()
            .zip(mask)
            .map(|(&v, &m)| {
                if !m {
                    BACKGROUND
                } else if range <= 0.0 {
                    0
                } else {
                    (((v - lo) / range * n_levels as f64).floor() as u16).min(top)
                }
            })
            .collect();
        Self { height, width, n_levels, levels }
    }
}

/// Normalized symmetric co-occurrence matrix, row-major `n × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Glcm {
    pub n: usize,
    pub p: Vec<f64>,
}

/// Accumulates co-occurrences over all `offsets`, counting each pair in both
/// orders and skipping pairs that touch background, then normalizes to 1.
pub fn glcm(q: &Quantized, offsets: &[(isize, isize)]) -> Result<Glcm, FeatureError> {
    if q.n_levels < 2 {
        return Err(FeatureError::TooFewLevels(q.n_levels));
    }
    let n = q.n_levels;
    let mut counts = vec![0u64; n * n];
    let (h, w) = (q.height as isize, q.width as isize);
    for r in 0..h {
        for c in 0..w {
            let a = q.levels[(r * w + c) as usize];
            if a == BACKGROUND {
                continue;
            }
            for &(dr, dc) in offsets {
                let (r2, c2) = (r + dr, c + dc);
                if r2 < 0 || r2 >= h || c2 < 0 || c2 >= w {
                    continue;
                }
                let b = q.levels[(r2 * w + c2) as usize];
                if b == BACKGROUND {
                    continue;
                }
                let (i, j) = (a as usize, b as usize);
                counts[i * n + j] += 1;
                counts[j * n + i] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(FeatureError::NoValidPairs);
    }
    let p = counts.iter().map(|&k| k as f64 / total as f64).collect();
    Ok(Glcm { n, p })
}

impl Glcm {
    fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let n = self.n;
        self.p.iter().enumerate().map(move |(idx, &p)| ((idx / n) as f64, (idx % n) as f64, p))
    }

    pub fn contrast(&self) -> f64 {
        self.cells().map(|(i, j, p)| (i - j) * (i - j) * p).sum()
    }

    /// Angular second moment `Σ p²`.
    pub fn energy(&self) -> f64 {
        self.p.iter().map(|p| p * p).sum()
    }

    /// Entropy in bits.
    pub fn entropy(&self) -> f64 {
        -self.p.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
    }

    /// Pearson correlation between row and column level; 0 when either
    /// marginal is degenerate (σ < 1e-12).
    pub fn correlation(&self) -> f64 {
        let (mut mu_i, mut mu_j) = (0.0, 0.0);
        for (i, j, p) in self.cells() {
            mu_i += i * p;
            mu_j += j * p;
        }
        let (mut var_i, mut var_j, mut cross) = (0.0, 0.0, 0.0);
        for (i, j, p) in self.cells() {
            var_i += (i - mu_i) * (i - mu_i) * p;
            var_j += (j - mu_j) * (j - mu_j) * p;
            cross += i * j * p;
        }
        let (sd_i, sd_j) = (var_i.sqrt(), var_j.sqrt());
        if sd_i < 1e-12 || sd_j < 1e-12 {
            return 0.0;
        }
        (cross - mu_i * mu_j) / (sd_i * sd_j)
    }
}
