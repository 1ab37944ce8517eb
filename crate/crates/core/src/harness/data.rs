//! Samples, the synthetic nodule generator, and the on-disk dataset layout:
//! `images/<name>.pgm`, `masks/<name>.pgm` (binary P5, 8-bit) and
//! `labels.csv` with header `filename,tirads`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HarnessError;
use crate::features::{morphology, Image, Mask};
use crate::model::{DOWNSAMPLE, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    /// 0-based class (TR1 → 0).
    pub label: usize,
    pub case_id: String,
    pub filename: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Common image size, if every sample shares one.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        let d = self.samples.first()?.image.dims();
        self.samples.iter().all(|s| s.image.dims() == d).then_some(d)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { samples: idx.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// Latent parameters of one synthetic nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleParams {
    pub center: (f64, f64),
    /// Mean radius in pixels.
    pub radius: f64,
    /// Vertical-to-horizontal axis ratio before rotation.
    pub axis_ratio: f64,
    pub rotation: f64,
    pub perturb_amp: f64,
    pub perturb_freq: u32,
    pub perturb_phase: f64,
    pub blur: f64,
    /// Intensity offset of the nodule relative to the background level.
    pub echo: f64,
    /// Std of the internal texture noise.
    pub texture: f64,
    pub background: f64,
}

pub const ECHO_THRESHOLD: f64 = -0.15;
pub const IRREGULAR_AMP: f64 = 0.12;
pub const IRREGULAR_BLUR: f64 = 1.0;
pub const TEXTURE_THRESHOLD: f64 = 0.06;
/// Amplitude of the multiplicative speckle around the background level.
const SPECKLE: f64 = 0.15;
const MIN_NODULE_PIXELS: usize = 12;

impl NoduleParams {
    pub fn sample(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as f64;
        let echo = if rng.gen_bool(0.5) { rng.gen_range(-0.35..-0.17) } else { rng.gen_range(0.10..0.28) };
        Self {
            center: (s / 2.0 + rng.gen_range(-0.08..0.08) * s, s / 2.0 + rng.gen_range(-0.08..0.08) * s),
            radius: rng.gen_range(0.17..0.28) * s,
            axis_ratio: rng.gen_range(0.65..1.5),
            rotation: rng.gen_range(-0.35..0.35),
            perturb_amp: rng.gen_range(0.0..0.25),
            perturb_freq: rng.gen_range(3..=7),
            perturb_phase: rng.gen_range(0.0..2.0 * PI),
            blur: rng.gen_range(0.0..2.0),
            echo,
            texture: rng.gen_range(0.0..0.12),
            background: rng.gen_range(0.38..0.52),
        }
    }

    pub fn irregular(&self) -> bool {
        self.perturb_amp > IRREGULAR_AMP && self.blur < IRREGULAR_BLUR
    }

    /// Nodule indicator on a `size × size` grid.
    pub fn mask(&self, size: usize) -> Mask {
        let (sa, sb) = (self.axis_ratio.sqrt(), 1.0 / self.axis_ratio.sqrt());
        let (ry, rx) = (self.radius * sa, self.radius * sb);
        let (sin, cos) = self.rotation.sin_cos();
        let mut m = Mask::empty(size, size);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = (r as f64 + 0.5 - self.center.0, c as f64 + 0.5 - self.center.1);
                // rotate into the ellipse frame
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let rho = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                let phi = v.atan2(u);
                let edge = 1.0 + self.perturb_amp * (self.perturb_freq as f64 * phi + self.perturb_phase).sin();
                m.pixels[r * size + c] = rho <= edge;
            }
        }
        m
    }
}

/// Risk points: taller-than-wide 2, hypoechoic 2, irregular margin 2,
/// heterogeneous texture 1.
pub fn label_points(p: &NoduleParams, mask: &Mask) -> u32 {
    let mut pts = 0;
    if let Some((r0, r1, c0, c1)) = morphology::bounding_box(mask) {
        if r1 - r0 > c1 - c0 {
            pts += 2;
        }
    }
    if p.echo < ECHO_THRESHOLD {
        pts += 2;
    }
    if p.irregular() {
        pts += 2;
    }
    if p.texture > TEXTURE_THRESHOLD {
        pts += 1;
    }
    pts
}

/// 0-based class from points: 0 → TR1, 1–2 → TR2, 3 → TR3, 4–5 → TR4, ≥6 → TR5.
pub fn points_to_class(points: u32) -> usize {
    match points {
        0 => 0,
        1 | 2 => 1,
        3 => 2,
        4 | 5 => 3,
        _ => 4,
    }
}

fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let n = size as isize;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            tmp[r * size + c] =
                kernel.iter().enumerate().map(|(k, w)| w * img[r * size + clamp(c as isize + k as isize - radius)]).sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] =
                kernel.iter().enumerate().map(|(k, w)| w * tmp[clamp(r as isize + k as isize - radius) * size + c]).sum();
        }
    }
    out
}

/// Renders image and mask for `p`, drawing speckle and texture from `rng`.
pub fn render(p: &NoduleParams, size: usize, rng: &mut impl Rng) -> (Image, Mask) {
    let mask = p.mask(size);
    let indicator: Vec<f64> = mask.pixels.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let soft = gaussian_blur(&indicator, size, p.blur);
    let texture = Normal::new(0.0, p.texture.max(1e-12)).expect("finite std");
    let rayleigh_mean = (PI / 2.0).sqrt();
    let pixels = (0..size * size)
        .map(|i| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let speckle = (-2.0 * u.ln()).sqrt() / rayleigh_mean;
            let mut v = p.background * (1.0 + SPECKLE * (speckle - 1.0)) + p.echo * soft[i];
            let t = texture.sample(rng);
            if mask.pixels[i] {
                v += t;
            }
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    (Image::new(size, size, pixels), mask)
}

/// Deterministic synthetic dataset of `n` cases (one image each).
pub fn gen_synthetic(n: usize, size: usize, seed: u64) -> Result<Dataset, HarnessError> {
    if size == 0 || size % DOWNSAMPLE != 0 {
        return Err(HarnessError::Invalid(format!("image size {size} must be a positive multiple of {DOWNSAMPLE}")));
    }
    if n < 10 {
        return Err(HarnessError::Invalid(format!("need at least 10 cases, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let (p, image, mask) = loop {
            let p = NoduleParams::sample(&mut rng, size);
            let (image, mask) = render(&p, size, &mut rng);
            if mask.count() >= MIN_NODULE_PIXELS {
                break (p, image, mask);
            }
        };
        let label = points_to_class(label_points(&p, &mask));
        let case_id = format!("case{:04}", i + 1);
        let filename = format!("{case_id}_0.pgm");
        samples.push(Sample { image, mask, label, case_id, filename });
    }
    Ok(Dataset { samples })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Binary 8-bit P5 encoding.
pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Parses a binary P5 file with `maxval ≤ 255`; returns `(width, height,
/// maxval, pixels)`.
pub fn decode_pgm(data: &[u8]) -> Result<(usize, usize, u32, Vec<u8>), String> {
    let mut pos = 0;
    let mut next_token = |data: &[u8]| -> Result<String, String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let magic = next_token(data)?;
    if magic != "P5" {
        return Err(format!("expected magic P5, found {magic:?}"));
    }
    let mut num = |what: &str| -> Result<usize, String> {
        let t = next_token(data)?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if end > data.len() {
        return Err(format!("raster truncated: need {} bytes, have {}", width * height, data.len().saturating_sub(start)));
    }
    Ok((width, height, maxval as u32, data[start..end].to_vec()))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, u32, Vec<u8>), HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes).map_err(|detail| HarnessError::Pgm { path: path.to_path_buf(), detail })
}

/// Reads a grayscale PGM as intensities in [0, 1].
pub fn read_image(path: &Path) -> Result<Image, HarnessError> {
    let (w, h, maxval, raw) = read_pgm(path)?;
    Ok(Image::new(h, w, raw.iter().map(|&v| v as f64 / maxval as f64).collect()))
}

/// Reads a PGM mask; pixels above half of maxval are foreground.
pub fn read_mask(path: &Path) -> Result<Mask, HarnessError> {
    let (w, h, maxval, raw) = read_pgm(path)?;
    Ok(Mask::new(h, w, raw.iter().map(|&v| 2 * v as u32 > maxval).collect()))
}

/// Case id of a file name: the stem up to its last `_`.
pub fn case_id_of(filename: &str) -> String {
    let stem = filename.strip_suffix(".pgm").unwrap_or(filename);
    match stem.rfind('_') {
        Some(i) => stem[..i].to_string(),
        None => stem.to_string(),
    }
}

/// Loads a dataset directory; samples are sorted by case id, then file name.
pub fn load_dataset(dir: &Path) -> Result<Dataset, HarnessError> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "filename,tirads" => {}
        other => {
            return Err(HarnessError::Labels {
                row: 1,
                detail: format!("expected header `filename,tirads`, found {:?}", other.map(|(_, h)| h).unwrap_or("")),
            })
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (filename, tirads) = line
            .split_once(',')
            .ok_or_else(|| HarnessError::Labels { row, detail: format!("expected 2 fields in {line:?}") })?;
        let (filename, tirads) = (filename.trim(), tirads.trim());
        let tr: usize = tirads
            .parse()
            .ok()
            .filter(|t| (1..=NUM_CLASSES).contains(t))
            .ok_or_else(|| HarnessError::Labels { row, detail: format!("tirads {tirads:?} outside 1..={NUM_CLASSES}") })?;
        let img_path = dir.join("images").join(filename);
        let mask_path = dir.join("masks").join(filename);
        if !mask_path.exists() {
            return Err(HarnessError::MissingMask(mask_path));
        }
        let image = read_image(&img_path)?;
        let mask = read_mask(&mask_path)?;
        if mask.dims() != image.dims() {
            return Err(HarnessError::MaskShape { file: filename.to_string(), image: image.dims(), mask: mask.dims() });
        }
        samples.push(Sample { image, mask, label: tr - 1, case_id: case_id_of(filename), filename: filename.to_string() });
    }
    let images_dir = dir.join("images");
    if let Ok(entries) = fs::read_dir(&images_dir) {
        let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        if let Some(orphan) = names.iter().find(|n| n.ends_with(".pgm") && !samples.iter().any(|s| &s.filename == *n)) {
            return Err(HarnessError::MissingLabel(orphan.clone()));
        }
    }
    samples.sort_by(|a, b| (&a.case_id, &a.filename).cmp(&(&b.case_id, &b.filename)));
    Ok(Dataset { samples })
}

/// Writes `data` in the directory layout read by [`load_dataset`].
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<(), HarnessError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut csv = String::from("filename,tirads\n");
    for s in &data.samples {
        let (h, w) = s.image.dims();
        let img: Vec<u8> = s.image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let msk: Vec<u8> = s.mask.pixels.iter().map(|&m| if m { 255 } else { 0 }).collect();
        let ip: PathBuf = images.join(&s.filename);
        fs::write(&ip, encode_pgm(w, h, &img)).map_err(io_err(&ip))?;
        let mp: PathBuf = masks.join(&s.filename);
        fs::write(&mp, encode_pgm(w, h, &msk)).map_err(io_err(&mp))?;
        csv.push_str(&format!("{},{}\n", s.filename, s.label + 1));
    }
    let lp = dir.join("labels.csv");
    fs::write(&lp, csv).map_err(io_err(&lp))
}
