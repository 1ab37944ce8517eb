//! Segmentation overlap, HD95 and multi-class classification metrics.

use serde::{Deserialize, Serialize};

use crate::features::{morphology, Mask};
use crate::model::NUM_CLASSES;

/// `2|A∩B|/(|A|+|B|)`; 1 when both are empty.
pub fn dice(pred: &Mask, truth: &Mask) -> f64 {
    let (inter, a, b) = overlap(pred, truth);
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `|A∩B|/|A∪B|`; 1 when both are empty.
pub fn iou(pred: &Mask, truth: &Mask) -> f64 {
    let (inter, a, b) = overlap(pred, truth);
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    assert_eq!(a.dims(), b.dims(), "mask shapes differ");
    let inter = a.pixels.iter().zip(&b.pixels).filter(|(&x, &y)| x && y).count();
    (inter, a.count(), b.count())
}

/// Exact squared Euclidean distance to the nearest `true` cell, row-major
/// (two passes of the 1-D lower-envelope transform). Cells are at infinite
/// distance when `sites` is all false.
pub fn squared_distance_transform(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut buf = vec![0.0; height.max(width)];
    for c in 0..width {
        for r in 0..height {
            buf[r] = f[r * width + c];
        }
        let d = dt_1d(&buf[..height]);
        for r in 0..height {
            f[r * width + c] = d[r];
        }
    }
    for r in 0..height {
        let d = dt_1d(&f[r * width..(r + 1) * width]);
        f[r * width..(r + 1) * width].copy_from_slice(&d);
    }
    f
}

/// `d[q] = min_p (q − p)² + f[p]` via the lower envelope of parabolas.
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let inter = |p: usize, q: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for &q in &finite {
        while let Some(&p) = v.last() {
            let s = inter(p, q);
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(if v.is_empty() { f64::NEG_INFINITY } else { inter(*v.last().unwrap(), q) });
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
    out
}

/// Percentile with linear interpolation between order statistics
/// (rank `q·(n−1)`).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Symmetric 95th-percentile boundary distance in pixels. Boundary pixels
/// are foreground pixels 8-adjacent to background (outside the image counts
/// as background). Both empty → 0; exactly one empty → the image diagonal.
pub fn hd95(pred: &Mask, truth: &Mask) -> f64 {
    let (h, w) = pred.dims();
    assert_eq!(truth.dims(), (h, w), "mask shapes differ");
    let (bp, bt) = (morphology::boundary(pred), morphology::boundary(truth));
    let (np, nt) = (bp.iter().filter(|&&b| b).count(), bt.iter().filter(|&&b| b).count());
    match (np, nt) {
        (0, 0) => return 0.0,
        (0, _) | (_, 0) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let (dp, dt) = (squared_distance_transform(&bp, h, w), squared_distance_transform(&bt, h, w));
    let mut d: Vec<f64> = Vec::with_capacity(np + nt);
    d.extend(bp.iter().zip(&dt).filter(|(&b, _)| b).map(|(_, v)| v.sqrt()));
    d.extend(bt.iter().zip(&dp).filter(|(&b, _)| b).map(|(_, v)| v.sqrt()));
    percentile(&mut d, 0.95)
}

/// Per-class and macro-averaged precision / recall / F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub support: [usize; NUM_CLASSES],
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
}

/// Undefined ratios (no predictions / no support) count as 0.
pub fn classification_report(pred: &[usize], truth: &[usize]) -> ClassificationReport {
    assert_eq!(pred.len(), truth.len());
    let mut tp = [0usize; NUM_CLASSES];
    let mut n_pred = [0usize; NUM_CLASSES];
    let mut support = [0usize; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        n_pred[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision: [f64; NUM_CLASSES] = std::array::from_fn(|c| ratio(tp[c], n_pred[c]));
    let recall: [f64; NUM_CLASSES] = std::array::from_fn(|c| ratio(tp[c], support[c]));
    let f1: [f64; NUM_CLASSES] = std::array::from_fn(|c| {
        let (p, r) = (precision[c], recall[c]);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    });
    let mean = |a: &[f64; NUM_CLASSES]| a.iter().sum::<f64>() / NUM_CLASSES as f64;
    ClassificationReport {
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        f1_macro: mean(&f1),
        accuracy: ratio(tp.iter().sum(), pred.len()),
        precision,
        recall,
        f1,
        support,
    }
}

/// Macro-F1 of always predicting the most frequent class of `train`.
pub fn majority_baseline_f1(train: &[usize], eval: &[usize]) -> f64 {
    let mut counts = [0usize; NUM_CLASSES];
    for &t in train {
        counts[t] += 1;
    }
    let majority = crate::model::argmax(&counts.map(|c| c as f64));
    classification_report(&vec![majority; eval.len()], eval).f1_macro
}

/// Aggregate evaluation report (serialized as `metrics.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub dice: f64,
    pub dice_std: f64,
    pub iou: f64,
    pub iou_std: f64,
    pub hd95: f64,
    pub hd95_std: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
    pub per_class: PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub support: [usize; NUM_CLASSES],
}

impl MetricsReport {
    /// `seg` pairs predicted and reference masks; `pred`/`truth` are classes.
    pub fn compute(seg: &[(Mask, &Mask)], pred: &[usize], truth: &[usize]) -> Self {
        let d: Vec<f64> = seg.iter().map(|(p, t)| dice(p, t)).collect();
        let j: Vec<f64> = seg.iter().map(|(p, t)| iou(p, t)).collect();
        let h: Vec<f64> = seg.iter().map(|(p, t)| hd95(p, t)).collect();
        let (dice, dice_std) = mean_std(&d);
        let (iou, iou_std) = mean_std(&j);
        let (hd95, hd95_std) = mean_std(&h);
        let c = classification_report(pred, truth);
        Self {
            n_samples: truth.len(),
            dice,
            dice_std,
            iou,
            iou_std,
            hd95,
            hd95_std,
            precision_macro: c.precision_macro,
            recall_macro: c.recall_macro,
            f1_macro: c.f1_macro,
            accuracy: c.accuracy,
            per_class: PerClass { precision: c.precision, recall: c.recall, f1: c.f1, support: c.support },
        }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}
