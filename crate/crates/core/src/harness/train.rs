//! Total-loss training loop, evaluation and feature ablation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{majority_baseline_f1, MetricsReport};
use super::optim::AdamW;
use super::{class_weights, kfold_split, label_counts, Dataset, HarnessError, Sample, TrainConfig};
use crate::features::{extract_features, FeatureVector, Mask, StandardizationStats, FEATURE_NAMES, NUM_FEATURES};
use crate::gradcore::{Graph, Tensor};
use crate::model::{clin_loss, dice_loss, forward, images_to_tensor, predict, weighted_ce, ModelState, Prediction};
use crate::rlar::{rlar_loss, RlarConfig, Task};

/// Unordered task pairs in log-column order.
pub const PAIRS: [(Task, Task); 3] = [(Task::Seg, Task::Cls), (Task::Seg, Task::Clin), (Task::Cls, Task::Clin)];

/// Header of `train_log.csv`.
pub const LOG_HEADER: &str =
    "epoch,L_total,L_seg,L_cls,L_clin,L_rlar,cos_seg_cls,cos_seg_clin,cos_cls_clin,val_dice,val_macro_f1";

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_total: f64,
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_clin: f64,
    pub l_rlar: f64,
    /// Batch-mean |cos| per pair, in [`PAIRS`] order.
    pub cos: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_total: f64,
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_clin: f64,
    pub l_rlar: f64,
    pub cos: [f64; 3],
    pub val_dice: f64,
    pub val_macro_f1: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l_total,
            self.l_seg,
            self.l_cls,
            self.l_clin,
            self.l_rlar,
            self.cos[0],
            self.cos[1],
            self.cos[2],
            self.val_dice,
            self.val_macro_f1
        )
    }

    /// Mean |cos| over the three pairs.
    pub fn mean_cos(&self) -> f64 {
        self.cos.iter().sum::<f64>() / 3.0
    }
}

pub fn log_csv(epochs: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in epochs {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    /// Best checkpoint, values rounded through `f32` exactly as stored on disk.
    pub state: ModelState,
    pub class_weights: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub val_metrics: MetricsReport,
    /// `(case_id, fold)` for every distinct case.
    pub fold_assignments: Vec<(String, usize)>,
    pub selection_history: Vec<f64>,
    pub best_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Macro-F1 on the validation split of always predicting the majority
    /// training class.
    pub majority_baseline_f1: f64,
}

/// Case-level train/validation split of `data` for `cfg.fold`.
pub fn split_indices(cfg: &TrainConfig, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>, Vec<(String, usize)>), HarnessError> {
    let ids: Vec<String> = data.samples.iter().map(|s| s.case_id.clone()).collect();
    let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut assignments = std::collections::BTreeMap::new();
    for (i, &f) in folds.iter().enumerate() {
        if f == cfg.fold {
            val.push(i);
        } else {
            train.push(i);
        }
        assignments.insert(ids[i].clone(), f);
    }
    let assignments = assignments.into_iter().collect();
    Ok((train, val, assignments))
}

/// Radiomics of each sample (training targets only).
pub fn sample_features(samples: &[&Sample]) -> Result<Vec<FeatureVector>, HarnessError> {
    samples
        .iter()
        .map(|s| {
            extract_features(&s.image, &s.mask).map_err(|source| HarnessError::Feature { sample: s.filename.clone(), source })
        })
        .collect()
}

/// Image-only predictions for `samples`, in order.
pub fn predict_samples(state: &ModelState, samples: &[&Sample]) -> Result<Vec<Prediction>, HarnessError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        out.extend(predict(state, &images)?);
    }
    Ok(out)
}

fn threshold(p: &Prediction, h: usize, w: usize) -> Mask {
    Mask::new(h, w, p.seg_prob.iter().map(|&v| v >= 0.5).collect())
}

/// Segmentation and classification metrics of `state` on `samples`.
pub fn evaluate_samples(state: &ModelState, samples: &[&Sample]) -> Result<MetricsReport, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict_samples(state, samples)?;
    let seg: Vec<(Mask, &Mask)> =
        preds.iter().zip(samples).map(|(p, s)| (threshold(p, s.mask.height, s.mask.width), &s.mask)).collect();
    let cls: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(MetricsReport::compute(&seg, &cls, &truth))
}

pub fn evaluate(state: &ModelState, data: &Dataset) -> Result<MetricsReport, HarnessError> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    evaluate_samples(state, &refs)
}

fn rounded(state: &ModelState) -> ModelState {
    ModelState {
        params: state.params.iter().map(|(n, t)| (n.clone(), t.round_f32())).collect(),
        clin_stats: state.clin_stats.clone(),
    }
}

struct Batch {
    x: Tensor,
    mask: Tensor,
    labels: Vec<usize>,
    target: Tensor,
}

fn make_batch(samples: &[&Sample], targets: &[&FeatureVector]) -> Result<Batch, HarnessError> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images)?;
    let (h, w) = samples[0].mask.dims();
    let mask_data = samples.iter().flat_map(|s| s.mask.pixels.iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
    let mask = Tensor::new(vec![samples.len(), h, w], mask_data)?;
    let target = Tensor::new(vec![samples.len(), NUM_FEATURES], targets.iter().flat_map(|f| f.0).collect())?;
    Ok(Batch { x, mask, labels: samples.iter().map(|s| s.label).collect(), target })
}

/// One forward/backward pass: returns the log entry and parameter gradients.
fn train_step(
    state: &ModelState,
    batch: &Batch,
    cfg: &TrainConfig,
    weights: &[f64],
    epoch: usize,
    step: usize,
) -> Result<(StepLog, Vec<Tensor>), HarnessError> {
    let g = Graph::new();
    let p = state.bind(&g);
    let out = forward(&p, g.constant(batch.x.clone()))?;
    let l_seg = dice_loss(out.seg, g.constant(batch.mask.clone()))?;
    let l_cls = weighted_ce(out.logits, &batch.labels, weights)?;
    let l_clin = clin_loss(out.h_tirads()?, g.constant(batch.target.clone()))?;
    for (name, v) in [("L_seg", l_seg), ("L_cls", l_cls), ("L_clin", l_clin)] {
        if !v.item().is_finite() {
            return Err(HarnessError::NonFinite { component: name, epoch, step });
        }
    }
    let losses = [(Task::Seg, l_seg), (Task::Cls, l_cls), (Task::Clin, l_clin)];
    let rl = rlar_loss(&losses, &out, &cfg.rlar)?;
    // diagnostics always cover every pair, whatever subset the penalty uses
    let diag = if cfg.rlar.tasks.len() == Task::ALL.len() {
        rl.pair_means.clone()
    } else {
        let all = RlarConfig { tasks: Task::ALL.to_vec(), lambda_adv: 0.0, ..cfg.rlar.clone() };
        rlar_loss(&losses, &out, &all)?.pair_means
    };
    let mut cos = [0.0; 3];
    for (pair, v) in diag {
        let k = PAIRS.iter().position(|q| *q == pair).expect("pairs are in canonical order");
        cos[k] = v;
    }
    if !rl.loss.item().is_finite() {
        return Err(HarnessError::NonFinite { component: "L_rlar", epoch, step });
    }
    let total = l_seg
        .scale(cfg.lambda_seg)?
        .add(l_cls.scale(cfg.lambda_cls)?)?
        .add(l_clin.scale(cfg.lambda_clin)?)?
        .add(rl.loss)?;
    if !total.item().is_finite() {
        return Err(HarnessError::NonFinite { component: "L_total", epoch, step });
    }
    let grads = g.grad(total, &p.all(), false)?;
    let grads: Vec<Tensor> = grads.values().iter().map(|t| t.as_ref().clone()).collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(HarnessError::NonFinite { component: "gradient", epoch, step });
    }
    let log = StepLog {
        epoch,
        step,
        l_total: total.item(),
        l_seg: l_seg.item(),
        l_cls: l_cls.item(),
        l_clin: l_clin.item(),
        l_rlar: rl.loss.item(),
        cos,
    };
    Ok((log, grads))
}

/// Trains on every fold except `cfg.fold` and validates on `cfg.fold`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<RunArtifacts, HarnessError> {
    train_with_progress(cfg, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let s = cfg.image_size;
    match data.image_dims() {
        Some(d) if d == (s, s) => {}
        Some(d) => return Err(HarnessError::Invalid(format!("dataset images are {d:?}, config expects {s}x{s}"))),
        None if data.is_empty() => return Err(HarnessError::Invalid("empty dataset".into())),
        None => return Err(HarnessError::Invalid("dataset images have mixed sizes".into())),
    }
    if let Some(bad) = data.samples.iter().find(|s| s.mask.count() == 0) {
        return Err(HarnessError::Invalid(format!("{}: empty mask in training data", bad.filename)));
    }
    let (train_idx, val_idx, fold_assignments) = split_indices(cfg, data)?;
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &data.samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &data.samples[i]).collect();

    let raw = sample_features(&train_set)?;
    let stats = StandardizationStats::fit(&raw);
    let targets: Vec<FeatureVector> = raw.iter().map(|f| stats.standardize(f)).collect();
    let weights = class_weights(&label_counts(train_set.iter().map(|s| s.label)))?;
    let baseline =
        majority_baseline_f1(&train_set.iter().map(|s| s.label).collect::<Vec<_>>(), &val_set.iter().map(|s| s.label).collect::<Vec<_>>());

    let mut state = ModelState::init(cfg.seed);
    state.clin_stats = stats;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, state.params.iter().map(|(_, t)| t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let n = train_set.len();
    let steps_per_epoch = if cfg.steps_per_epoch == 0 { n.div_ceil(cfg.batch_size) } else { cfg.steps_per_epoch };
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let (mut epochs, mut steps) = (Vec::new(), Vec::new());
    let mut selection_history = Vec::new();
    let mut best: Option<(f64, usize, ModelState)> = None;

    for epoch in 1..=cfg.epochs {
        let mut acc = [0.0; 8];
        for step in 0..steps_per_epoch {
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(n);
            let idx = &order[cursor..end];
            cursor = end;
            let batch_samples: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let batch_targets: Vec<&FeatureVector> = idx.iter().map(|&i| &targets[i]).collect();
            let batch = make_batch(&batch_samples, &batch_targets)?;
            let (log, grads) = train_step(&state, &batch, cfg, &weights, epoch, step)?;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(state.params.iter_mut().map(|(_, t)| t), &grad_refs);
            if !state.is_finite() {
                return Err(HarnessError::NonFinite { component: "parameters", epoch, step });
            }
            for (a, v) in acc.iter_mut().zip([log.l_total, log.l_seg, log.l_cls, log.l_clin, log.l_rlar, log.cos[0], log.cos[1], log.cos[2]]) {
                *a += v;
            }
            steps.push(log);
        }
        let m = steps_per_epoch as f64;
        let candidate = rounded(&state);
        let val = evaluate_samples(&candidate, &val_set)?;
        let score = cfg.selection_metric.score(val.dice, val.f1_macro);
        selection_history.push(score);
        if best.as_ref().map(|(b, _, _)| score > *b).unwrap_or(true) {
            best = Some((score, epoch, candidate));
        }
        let log = EpochLog {
            epoch,
            l_total: acc[0] / m,
            l_seg: acc[1] / m,
            l_cls: acc[2] / m,
            l_clin: acc[3] / m,
            l_rlar: acc[4] / m,
            cos: [acc[5] / m, acc[6] / m, acc[7] / m],
            val_dice: val.dice,
            val_macro_f1: val.f1_macro,
        };
        on_epoch(&log);
        epochs.push(log);
    }

    let (_, best_epoch, best_state) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, rounded(&state)),
    };
    let val_metrics = evaluate_samples(&best_state, &val_set)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        state: best_state,
        class_weights: weights,
        epochs,
        steps,
        val_metrics,
        fold_assignments,
        selection_history,
        best_epoch,
        train_size: train_set.len(),
        val_size: val_set.len(),
        majority_baseline_f1: baseline,
    })
}

/// Trains the listed validation folds with up to `jobs` threads; results are
/// returned in the order of `folds`.
pub fn train_folds(
    cfg: &TrainConfig,
    data: &Dataset,
    folds: &[usize],
    jobs: usize,
) -> Vec<Result<RunArtifacts, HarnessError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunArtifacts, HarnessError>>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, folds.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= folds.len() {
                    break;
                }
                let fold_cfg = TrainConfig { fold: folds[k], ..cfg.clone() };
                let r = train(&fold_cfg, data);
                results.lock().expect("no panics while holding the lock")[k] = Some(r);
            });
        }
    });
    results.into_inner().expect("threads joined").into_iter().map(|r| r.expect("every fold ran")).collect()
}

/// One row of the feature-ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature: String,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

/// Zeroes classifier column `k` (one radiomics channel of the embedding) for
/// each `k < 13`, reruns classification, and reports metric changes against
/// the unmodified model.
pub fn ablate_features(state: &ModelState, data: &Dataset) -> Result<Vec<AblationRow>, HarnessError> {
    let samples: Vec<&Sample> = data.samples.iter().collect();
    if samples.is_empty() {
        return Err(HarnessError::Invalid("cannot ablate on an empty dataset".into()));
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = |st: &ModelState| -> Result<_, HarnessError> {
        let cls: Vec<usize> = predict_samples(st, &samples)?.iter().map(|p| p.class).collect();
        Ok(super::metrics::classification_report(&cls, &truth))
    };
    let base = report(state)?;
    let mut rows = Vec::with_capacity(NUM_FEATURES);
    for (k, name) in FEATURE_NAMES.iter().enumerate() {
        let ablated = zero_classifier_column(state, k)?;
        let r = report(&ablated)?;
        rows.push(AblationRow {
            feature: name.to_string(),
            delta_precision: r.precision_macro - base.precision_macro,
            delta_recall: r.recall_macro - base.recall_macro,
            delta_f1: r.f1_macro - base.f1_macro,
        });
    }
    Ok(rows)
}

/// Copy of `state` with column `k` of the classifier weight set to zero.
pub fn zero_classifier_column(state: &ModelState, k: usize) -> Result<ModelState, HarnessError> {
    let mut s = state.clone();
    let w = s.get_mut("cls.w").ok_or_else(|| HarnessError::Invalid("missing classifier weight".into()))?;
    let cols = w.shape()[1];
    if k >= cols {
        return Err(HarnessError::Invalid(format!("column {k} out of range for {cols} columns")));
    }
    for row in w.data_mut().chunks_mut(cols) {
        row[k] = 0.0;
    }
    Ok(s)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("feature,delta_precision,delta_recall,delta_f1\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.feature, r.delta_precision, r.delta_recall, r.delta_f1));
    }
    s
}
