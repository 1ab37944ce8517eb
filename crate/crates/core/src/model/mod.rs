//! Shared encoder, segmentation decoder and split-embedding classification
//! head.
//!
//! Input `[B,1,H,W]` with `H`, `W` divisible by 16. Encoder stages halve the
//! resolution four times (channels 8, 16, 32, 64); a stride-1 bottleneck conv
//! yields `z̃`. The decoder upsamples back with skip connections from every
//! encoder stage and the input. The head pools `z̃` globally, then maps it
//! through a hidden layer to the embedding `h` (`K = 64`), whose first 13
//! entries are the radiomics-distilled part.

mod loss;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{Image, StandardizationStats, NUM_FEATURES};
use crate::gradcore::{GradError, Graph, Tensor, Var};

pub use loss::{clin_loss, dice_loss, weighted_ce, DICE_SMOOTH};

pub const NUM_CLASSES: usize = 5;
pub const EMBED_DIM: usize = 64;
pub const HIDDEN_DIM: usize = 64;
pub const ENCODER_CHANNELS: [usize; 4] = [8, 16, 32, 64];
/// Spatial downsampling factor between input and `z̃`.
pub const DOWNSAMPLE: usize = 16;

/// Hooked representation tags.
pub const HOOK_BOTTLENECK: &str = "bottleneck";
pub const HOOK_LAST: &str = "last";
pub const HOOK_STAGE3: &str = "stage3";
pub const HOOK_MID: &str = "mid";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("input spatial size {h}x{w} is not divisible by {DOWNSAMPLE}")]
    IndivisibleInput { h: usize, w: usize },
    #[error("expected input of shape [B,1,H,W], got {0:?}")]
    InputShape(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Size { what: &'static str, expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Decoder,
    Head,
}

/// One weight or bias tensor of the network.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub section: Section,
    pub is_bias: bool,
}

/// `(layer, c_in, c_out, kernel, section)` for every conv layer.
const CONVS: [(&str, usize, usize, usize, Section); 10] = [
    ("enc1", 1, 8, 3, Section::Encoder),
    ("enc2", 8, 16, 3, Section::Encoder),
    ("enc3", 16, 32, 3, Section::Encoder),
    ("enc4", 32, 64, 3, Section::Encoder),
    ("bottleneck", 64, 64, 3, Section::Encoder),
    ("dec3", 64 + 32, 32, 3, Section::Decoder),
    ("dec2", 32 + 16, 16, 3, Section::Decoder),
    ("dec1", 16 + 8, 8, 3, Section::Decoder),
    ("dec0", 8 + 1, 8, 3, Section::Decoder),
    ("seg_out", 8, 1, 1, Section::Decoder),
];

/// `(layer, in, out)` for the dense layers, stored `(out, in)`.
const DENSES: [(&str, usize, usize); 3] =
    [("head1", ENCODER_CHANNELS[3], HIDDEN_DIM), ("head2", HIDDEN_DIM, EMBED_DIM), ("cls", EMBED_DIM, NUM_CLASSES)];

/// Every parameter in canonical (checkpoint) order.
pub fn param_specs() -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (layer, c_in, c_out, k, section) in CONVS {
        let fan_in = c_in * k * k;
        out.push(ParamSpec { name: format!("{layer}.w"), shape: vec![c_out, c_in, k, k], fan_in, section, is_bias: false });
        out.push(ParamSpec { name: format!("{layer}.b"), shape: vec![c_out], fan_in, section, is_bias: true });
    }
    for (layer, d_in, d_out) in DENSES {
        let section = Section::Head;
        out.push(ParamSpec { name: format!("{layer}.w"), shape: vec![d_out, d_in], fan_in: d_in, section, is_bias: false });
        out.push(ParamSpec { name: format!("{layer}.b"), shape: vec![d_out], fan_in: d_in, section, is_bias: true });
    }
    out
}

/// All learnable parameters plus the clinical-target standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<(String, Tensor)>,
    pub clin_stats: StandardizationStats,
}

impl ModelState {
    /// He-uniform weights in `±sqrt(6/fan_in)`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs()
            .into_iter()
            .map(|spec| {
                let t = if spec.is_bias {
                    Tensor::zeros(&spec.shape)
                } else {
                    let bound = (6.0 / spec.fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                };
                (spec.name, t)
            })
            .collect();
        Self { params, clin_stats: StandardizationStats::identity() }
    }

    /// Every tensor replaced by zeros.
    pub fn zeros() -> Self {
        let params = param_specs().into_iter().map(|s| (s.name, Tensor::zeros(&s.shape))).collect();
        Self { params, clin_stats: StandardizationStats::identity() }
    }

    /// Rebuilds a state from named tensors, checking names and shapes.
    pub fn from_named(named: Vec<(String, Tensor)>, clin_stats: StandardizationStats) -> Result<Self, ModelError> {
        let mut by_name: BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut params = Vec::new();
        for spec in param_specs() {
            let t = by_name.remove(&spec.name).ok_or_else(|| ModelError::UnknownParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape { name: spec.name, expected: spec.shape, got: t.shape().to_vec() });
            }
            params.push((spec.name, t));
        }
        if let Some(extra) = by_name.into_keys().next() {
            return Err(ModelError::UnknownParam(extra));
        }
        Ok(Self { params, clin_stats })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a gradient-carrying leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.params.iter().map(|(n, t)| (n.clone(), g.param(t.clone()))).collect() }
    }
}

/// Parameters of a [`ModelState`] living in one graph, same order.
pub struct Bound<'g> {
    pub vars: Vec<(String, Var<'g>)>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, name: &str) -> Result<Var<'g>, ModelError> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v).ok_or_else(|| ModelError::UnknownParam(name.into()))
    }

    pub fn all(&self) -> Vec<Var<'g>> {
        self.vars.iter().map(|(_, v)| *v).collect()
    }

    /// Vars of one section, in canonical order.
    pub fn section(&self, section: Section) -> Vec<Var<'g>> {
        let specs = param_specs();
        self.vars.iter().zip(specs).filter(|(_, s)| s.section == section).map(|((_, v), _)| *v).collect()
    }

    fn conv(&self, layer: &str, x: Var<'g>, stride: usize) -> Result<Var<'g>, ModelError> {
        let w = self.var(&format!("{layer}.w"))?;
        let b = self.var(&format!("{layer}.b"))?;
        let pad = w.shape()[2] / 2;
        let y = x.conv2d(w, stride, pad)?;
        Ok(y.add(b.broadcast_channel(&y.shape())?)?)
    }

    fn dense(&self, layer: &str, x: Var<'g>) -> Result<Var<'g>, ModelError> {
        let w = self.var(&format!("{layer}.w"))?;
        let b = self.var(&format!("{layer}.b"))?;
        let y = x.matmul(w.transpose()?)?;
        Ok(y.add(b.broadcast_channel(&y.shape())?)?)
    }
}

pub struct ForwardOutputs<'g> {
    /// Foreground probabilities `[B,H,W]`.
    pub seg: Var<'g>,
    /// `[B,C]`.
    pub logits: Var<'g>,
    /// `[B,K]`.
    pub embedding: Var<'g>,
    /// Tag → representation; tags are the `HOOK_*` constants.
    pub hooks: BTreeMap<&'static str, Var<'g>>,
}

impl<'g> ForwardOutputs<'g> {
    /// The radiomics-distilled part `h[:, ..13]`.
    pub fn h_tirads(&self) -> Result<Var<'g>, ModelError> {
        Ok(self.embedding.narrow(1, 0, NUM_FEATURES)?)
    }

    pub fn hook(&self, tag: &str) -> Option<Var<'g>> {
        self.hooks.get(tag).copied()
    }
}

pub fn forward<'g>(p: &Bound<'g>, x: Var<'g>) -> Result<ForwardOutputs<'g>, ModelError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[0] == 0 {
        return Err(ModelError::InputShape(s));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(ModelError::IndivisibleInput { h, w });
    }
    let e1 = p.conv("enc1", x, 2)?.relu()?;
    let e2 = p.conv("enc2", e1, 2)?.relu()?;
    let e3 = p.conv("enc3", e2, 2)?.relu()?;
    let e4 = p.conv("enc4", e3, 2)?.relu()?;
    let z = p.conv("bottleneck", e4, 1)?.relu()?;

    let d3 = p.conv("dec3", Var::concat(&[z.upsample2()?, e3], 1)?, 1)?.relu()?;
    let d2 = p.conv("dec2", Var::concat(&[d3.upsample2()?, e2], 1)?, 1)?.relu()?;
    let d1 = p.conv("dec1", Var::concat(&[d2.upsample2()?, e1], 1)?, 1)?.relu()?;
    let d0 = p.conv("dec0", Var::concat(&[d1.upsample2()?, x], 1)?, 1)?.relu()?;
    let seg = p.conv("seg_out", d0, 1)?.sigmoid()?.reshape(&[b, h, w])?;

    let pooled = z.spatial_mean()?;
    let hidden = p.dense("head1", pooled)?.relu()?;
    let embedding = p.dense("head2", hidden)?;
    let logits = p.dense("cls", embedding)?;

    let hooks = BTreeMap::from([(HOOK_BOTTLENECK, z), (HOOK_LAST, e4), (HOOK_STAGE3, e3), (HOOK_MID, e2)]);
    Ok(ForwardOutputs { seg, logits, embedding, hooks })
}

/// Stacks equally sized images into a `[B,1,H,W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor, ModelError> {
    let first = images.first().ok_or(ModelError::Size { what: "batch", expected: 1, got: 0 })?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(ModelError::Size { what: "image pixels", expected: h * w, got: img.height * img.width });
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

/// Image-only inference output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Foreground probabilities, row-major `H×W`.
    pub seg_prob: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub embedding: Vec<f64>,
    pub class: usize,
}

/// Runs the network on images alone; masks are never consulted, so the
/// radiomics features play no part at inference.
pub fn predict(state: &ModelState, images: &[&Image]) -> Result<Vec<Prediction>, ModelError> {
    let g = Graph::inference();
    let p = state.bind(&g);
    let x = g.constant(images_to_tensor(images)?);
    let out = forward(&p, x)?;
    let (seg, logits, emb) = (out.seg.value(), out.logits.value(), out.embedding.value());
    let hw = seg.numel() / images.len();
    Ok((0..images.len())
        .map(|i| {
            let mut l = [0.0; NUM_CLASSES];
            l.copy_from_slice(&logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
            Prediction {
                seg_prob: seg.data()[i * hw..(i + 1) * hw].to_vec(),
                logits: l,
                embedding: emb.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM].to_vec(),
                class: argmax(&l),
            }
        })
        .collect())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
