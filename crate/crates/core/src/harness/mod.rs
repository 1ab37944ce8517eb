//! Data, training loop, evaluation, k-fold protocol, ablations and
//! persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureError;
use crate::gradcore::GradError;
use crate::model::{ModelError, NUM_CLASSES};
use crate::rlar::RlarError;

pub use checkpoint::{load_run, save_run, RunInfo};
pub use config::TrainConfig;
pub use data::{gen_synthetic, load_dataset, read_image, read_mask, write_dataset, Dataset, Sample};
pub use metrics::{ClassificationReport, MetricsReport};
pub use train::{ablate_features, evaluate, train, train_folds, AblationRow, EpochLog, RunArtifacts, StepLog};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed PGM: {detail}")]
    Pgm { path: PathBuf, detail: String },
    #[error("labels.csv row {row}: {detail}")]
    Labels { row: usize, detail: String },
    #[error("missing mask {0}")]
    MissingMask(PathBuf),
    #[error("image {0} has no entry in labels.csv")]
    MissingLabel(String),
    #[error("{file}: image is {image:?} but mask is {mask:?}")]
    MaskShape { file: String, image: (usize, usize), mask: (usize, usize) },
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error("class {class} has zero count")]
    ZeroCount { class: usize },
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite { component: &'static str, epoch: usize, step: usize },
    #[error("sample {sample}: {source}")]
    Feature { sample: String, source: FeatureError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rlar(#[from] RlarError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Numerical failures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::NonFinite { .. } => true,
            HarnessError::Grad(GradError::NonFinite { .. }) => true,
            HarnessError::Model(ModelError::Grad(GradError::NonFinite { .. })) => true,
            HarnessError::Rlar(RlarError::NonFiniteNorm(_) | RlarError::Grad(GradError::NonFinite { .. })) => true,
            _ => false,
        }
    }
}

/// Inverse-frequency weights `N/(C·n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, HarnessError> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(HarnessError::ZeroCount { class });
    }
    let n: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(counts.iter().map(|&k| n as f64 / (c * k as f64)).collect())
}

/// Case-level k-fold assignment: `result[i]` is the fold of `case_ids[i]`.
/// Repeated ids share a fold; fold sizes (in distinct cases) differ by at
/// most one.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Invalid(format!("k must be at least 2, got {k}")));
    }
    let mut unique: Vec<&String> = case_ids.iter().collect();
    unique.sort();
    unique.dedup();
    if unique.len() < k {
        return Err(HarnessError::Invalid(format!("{} distinct cases cannot fill {k} folds", unique.len())));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: std::collections::HashMap<&String, usize> = unique.iter().enumerate().map(|(i, id)| (*id, i % k)).collect();
    Ok(case_ids.iter().map(|id| fold_of[id]).collect())
}

/// Per-class label counts.
pub fn label_counts(labels: impl IntoIterator<Item = usize>) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for l in labels {
        c[l] += 1;
    }
    c
}
