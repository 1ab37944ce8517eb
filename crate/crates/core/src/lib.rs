//! Clinically guided multitask segmentation and risk grading with a
//! representation-level adversarial gradient-alignment regularizer.
//!
//! Modules, bottom-up:
//! - [`gradcore`]: reverse-mode autodiff with create-graph gradients.
//! - [`features`]: 13 radiomics descriptors from an image and a mask.
//! - [`model`]: shared encoder, segmentation decoder, split-embedding
//!   classification head, and the three task losses.
//! - [`rlar`]: per-task adversarial directions, pairwise |cos|, the penalty.
//! - [`harness`]: data, training, metrics, k-fold, ablations, persistence.

pub mod features;
pub mod gradcore;
pub mod harness;
pub mod model;
pub mod rlar;

pub use features::{extract_features, FeatureVector, Image, Mask, StandardizationStats, FEATURE_NAMES};
pub use gradcore::{Graph, Tensor, Var};
pub use harness::{Dataset, HarnessError, MetricsReport, RunArtifacts, Sample, TrainConfig};
pub use model::{ForwardOutputs, ModelState, Prediction};
pub use rlar::{HookMode, RlarConfig, Task};
