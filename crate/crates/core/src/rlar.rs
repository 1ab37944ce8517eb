//! Representation-level adversarial regularization.
//!
//! For each task `t`, the normalized gradient `δ_t = ε·g_t/(‖g_t‖ + ϵ̂)` of
//! its loss with respect to a hooked representation probes which latent
//! direction hurts `t` most. The penalty is the mean per-sample |cosine|
//! between the probes of every unordered task pair, scaled by `λ_adv`; it is
//! differentiable in the parameters because the probes are create-graph
//! gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Var};
use crate::model::{ForwardOutputs, HOOK_BOTTLENECK, HOOK_LAST, HOOK_MID, HOOK_STAGE3};

/// Floor on the cosine denominator `‖a‖‖b‖`; zero vectors give |cos| = 0.
pub const COS_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlarError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{0} loss does not depend on the hooked representation")]
    Unreachable(Task),
    #[error("gradient norm of the {0} loss is not finite")]
    NonFiniteNorm(Task),
    #[error("need at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("invalid RLAR setting: {0}")]
    Invalid(String),
    #[error("representation `{0}` is not hooked")]
    MissingHook(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
    Clin,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Seg, Task::Cls, Task::Clin];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Cls => "cls",
            Task::Clin => "clin",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = RlarError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| RlarError::Invalid(format!("unknown task `{s}`")))
    }
}

/// Which representation(s) the probes are taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookMode {
    Bottleneck,
    LastEncoder,
    MidEncoder,
    /// Mean of the per-layer penalties at the bottleneck and the two deepest
    /// encoder stages.
    MeanLast3,
}

impl HookMode {
    pub fn name(self) -> &'static str {
        match self {
            HookMode::Bottleneck => "bottleneck",
            HookMode::LastEncoder => "last_encoder",
            HookMode::MidEncoder => "mid_encoder",
            HookMode::MeanLast3 => "mean_last3",
        }
    }

    /// Hook tags of the model outputs this mode probes.
    pub fn tags(self) -> &'static [&'static str] {
        match self {
            HookMode::Bottleneck => &[HOOK_BOTTLENECK],
            HookMode::LastEncoder => &[HOOK_LAST],
            HookMode::MidEncoder => &[HOOK_MID],
            HookMode::MeanLast3 => &[HOOK_BOTTLENECK, HOOK_LAST, HOOK_STAGE3],
        }
    }
}

impl FromStr for HookMode {
    type Err = RlarError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [HookMode::Bottleneck, HookMode::LastEncoder, HookMode::MidEncoder, HookMode::MeanLast3]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| RlarError::Invalid(format!("unknown hook mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlarConfig {
    pub epsilon: f64,
    pub norm_guard: f64,
    pub lambda_adv: f64,
    pub tasks: Vec<Task>,
    pub hook_mode: HookMode,
}

impl Default for RlarConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, norm_guard: 1e-8, lambda_adv: 0.1, tasks: Task::ALL.to_vec(), hook_mode: HookMode::Bottleneck }
    }
}

impl RlarConfig {
    pub fn validate(&self) -> Result<(), RlarError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RlarError::Invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.norm_guard > 0.0 && self.norm_guard.is_finite()) {
            return Err(RlarError::Invalid(format!("norm_guard must be > 0, got {}", self.norm_guard)));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(RlarError::Invalid(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        let mut tasks = self.tasks.clone();
        tasks.sort();
        tasks.dedup();
        if tasks.len() != self.tasks.len() {
            return Err(RlarError::Invalid("duplicate task".into()));
        }
        if tasks.len() < 2 {
            return Err(RlarError::TooFewTasks(tasks.len()));
        }
        Ok(())
    }
}

/// Probe direction of each task at `rep`, in the order of `losses`.
///
/// With `create_graph` the directions stay differentiable with respect to
/// the parameters (needed for the penalty); without it they are constants.
pub fn adversarial_directions<'g>(
    losses: &[(Task, Var<'g>)],
    rep: Var<'g>,
    epsilon: f64,
    norm_guard: f64,
    create_graph: bool,
) -> Result<Vec<(Task, Var<'g>)>, RlarError> {
    let g = rep.graph();
    losses
        .iter()
        .map(|&(task, loss)| {
            let grads = g.grad(loss, &[rep], create_graph)?;
            if grads.unreachable[0] {
                return Err(RlarError::Unreachable(task));
            }
            let grad = grads.grads[0];
            let norm = grad.l2_norm()?;
            if !norm.item().is_finite() {
                return Err(RlarError::NonFiniteNorm(task));
            }
            let scale = norm.add_scalar(norm_guard)?.expand_scalar(&grad.shape())?;
            Ok((task, grad.div(scale, 0.0)?.scale(epsilon)?))
        })
        .collect()
}

/// |cos| between probe directions for one unordered task pair.
#[derive(Clone, Debug)]
pub struct PairSimilarity<'g> {
    pub pair: (Task, Task),
    /// Per-sample values `[B]`.
    pub per_sample: Var<'g>,
}

impl PairSimilarity<'_> {
    pub fn mean(&self) -> f64 {
        let v = self.per_sample.value();
        v.sum() / v.numel() as f64
    }
}

/// Per-sample |cos| for every unordered pair, in input order `(i < j)`.
pub fn pairwise_abs_cos<'g>(dirs: &[(Task, Var<'g>)]) -> Result<Vec<PairSimilarity<'g>>, RlarError> {
    if dirs.len() < 2 {
        return Err(RlarError::TooFewTasks(dirs.len()));
    }
    let b = dirs[0].1.shape()[0];
    let flat: Vec<Var<'g>> = dirs.iter().map(|(_, d)| d.flatten()).collect::<Result<_, _>>()?;
    let norms: Vec<Var<'g>> = flat.iter().map(|f| f.l2_norm_per_sample()).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let dot = flat[i].mul(flat[j])?.sum_per_sample()?;
            let denom = norms[i].mul(norms[j])?.clamp_min(COS_GUARD)?;
            let cos = dot.abs()?.div(denom, 0.0)?;
            debug_assert_eq!(cos.shape(), vec![b]);
            out.push(PairSimilarity { pair: (dirs[i].0, dirs[j].0), per_sample: cos });
        }
    }
    Ok(out)
}

/// `λ_adv` times the mean over samples and pairs of the pairwise |cos|.
pub fn rlar_penalty<'g>(pairs: &[PairSimilarity<'g>], lambda_adv: f64) -> Result<Var<'g>, RlarError> {
    let first = pairs.first().ok_or(RlarError::TooFewTasks(0))?;
    let mut total = first.per_sample;
    for p in &pairs[1..] {
        total = total.add(p.per_sample)?;
    }
    Ok(total.mean()?.scale(lambda_adv / pairs.len() as f64)?)
}

/// Penalty and diagnostics for one step.
pub struct RlarOutput<'g> {
    /// Differentiable penalty (a constant zero when `λ_adv = 0`).
    pub loss: Var<'g>,
    /// Batch-mean |cos| for each unordered pair of the configured tasks,
    /// averaged over the probed layers.
    pub pair_means: Vec<((Task, Task), f64)>,
}

/// Builds the penalty from task losses and model outputs.
///
/// `losses` must contain every configured task. Diagnostics are always
/// computed; the create-graph machinery is only engaged when `λ_adv > 0`.
pub fn rlar_loss<'g>(
    losses: &[(Task, Var<'g>)],
    outputs: &ForwardOutputs<'g>,
    cfg: &RlarConfig,
) -> Result<RlarOutput<'g>, RlarError> {
    cfg.validate()?;
    let selected: Vec<(Task, Var<'g>)> = cfg
        .tasks
        .iter()
        .map(|t| {
            losses
                .iter()
                .find(|(lt, _)| lt == t)
                .copied()
                .ok_or_else(|| RlarError::Invalid(format!("no loss supplied for task {t}")))
        })
        .collect::<Result<_, _>>()?;
    let differentiable = cfg.lambda_adv > 0.0;
    let tags = cfg.hook_mode.tags();
    let mut layer_losses = Vec::new();
    let mut pair_means: Vec<((Task, Task), f64)> = Vec::new();
    for &tag in tags {
        let rep = outputs.hook(tag).ok_or(RlarError::MissingHook(tag))?;
        let dirs = adversarial_directions(&selected, rep, cfg.epsilon, cfg.norm_guard, differentiable)?;
        let pairs = pairwise_abs_cos(&dirs)?;
        for (k, p) in pairs.iter().enumerate() {
            if pair_means.len() <= k {
                pair_means.push((p.pair, 0.0));
            }
            pair_means[k].1 += p.mean() / tags.len() as f64;
        }
        if differentiable {
            layer_losses.push(rlar_penalty(&pairs, cfg.lambda_adv)?);
        }
    }
    let g = outputs.seg.graph();
    let loss = if differentiable {
        let mut total = layer_losses[0];
        for l in &layer_losses[1..] {
            total = total.add(*l)?;
        }
        total.scale(1.0 / layer_losses.len() as f64)?
    } else {
        g.scalar(0.0)
    };
    Ok(RlarOutput { loss, pair_means })
}
