//! Training configuration and its flat `key = value` text form (one pair per
//! line, `#` starts a comment, unknown keys are errors).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::DOWNSAMPLE;
use crate::rlar::{HookMode, RlarConfig, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// `(macro-F1 + Dice) / 2`.
    F1DiceMean,
    Dice,
    F1,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::F1DiceMean => "f1_dice_mean",
            SelectionMetric::Dice => "dice",
            SelectionMetric::F1 => "f1",
        }
    }

    pub fn score(self, dice: f64, f1: f64) -> f64 {
        match self {
            SelectionMetric::F1DiceMean => (f1 + dice) / 2.0,
            SelectionMetric::Dice => dice,
            SelectionMetric::F1 => f1,
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [SelectionMetric::F1DiceMean, SelectionMetric::Dice, SelectionMetric::F1]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown selection metric `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_seg: f64,
    pub lambda_cls: f64,
    pub lambda_clin: f64,
    pub rlar: RlarConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 means one full pass over the training split.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub image_size: usize,
    pub folds: usize,
    /// Validation fold index.
    pub fold: usize,
    pub selection_metric: SelectionMetric,
    /// Dataset directory; when absent a synthetic set is generated.
    pub data_dir: Option<String>,
    pub synthetic_cases: usize,
    pub synthetic_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_cls: 1.0,
            lambda_clin: 0.1,
            rlar: RlarConfig::default(),
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            steps_per_epoch: 0,
            seed: 3,
            image_size: 32,
            folds: 5,
            fold: 0,
            selection_metric: SelectionMetric::F1DiceMean,
            data_dir: None,
            synthetic_cases: 640,
            synthetic_seed: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for `{key}`"))
}

impl TrainConfig {
    /// Names accepted by [`TrainConfig::set`].
    pub const KEYS: [&'static str; 21] = [
        "lambda_seg",
        "lambda_cls",
        "lambda_clin",
        "lambda_adv",
        "epsilon",
        "norm_guard",
        "tasks",
        "hook_mode",
        "lr",
        "weight_decay",
        "batch_size",
        "epochs",
        "steps_per_epoch",
        "seed",
        "image_size",
        "folds",
        "fold",
        "selection_metric",
        "data_dir",
        "synthetic_cases",
        "synthetic_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "lambda_seg" => self.lambda_seg = parse(key, value)?,
            "lambda_cls" => self.lambda_cls = parse(key, value)?,
            "lambda_clin" => self.lambda_clin = parse(key, value)?,
            "lambda_adv" => self.rlar.lambda_adv = parse(key, value)?,
            "epsilon" => self.rlar.epsilon = parse(key, value)?,
            "norm_guard" => self.rlar.norm_guard = parse(key, value)?,
            "tasks" => {
                self.rlar.tasks = value
                    .split(',')
                    .map(|t| t.trim().parse::<Task>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "hook_mode" => self.rlar.hook_mode = value.parse::<HookMode>().map_err(|e| e.to_string())?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "selection_metric" => self.selection_metric = value.parse()?,
            "data_dir" => self.data_dir = Some(value.to_string()),
            "synthetic_cases" => self.synthetic_cases = parse(key, value)?,
            "synthetic_seed" => self.synthetic_seed = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses the text form on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| HarnessError::Config { line: i + 1, detail };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        for (name, w) in [("lambda_seg", self.lambda_seg), ("lambda_cls", self.lambda_cls), ("lambda_clin", self.lambda_clin)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {w}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return bad(format!("image_size must be a positive multiple of {DOWNSAMPLE}, got {}", self.image_size));
        }
        if self.folds < 2 || self.fold >= self.folds {
            return bad(format!("need folds >= 2 and fold < folds, got fold {} of {}", self.fold, self.folds));
        }
        self.rlar.validate()?;
        Ok(())
    }

    /// Text form accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let tasks: Vec<&str> = self.rlar.tasks.iter().map(|t| t.name()).collect();
        let _ = writeln!(s, "lambda_seg = {}", self.lambda_seg);
        let _ = writeln!(s, "lambda_cls = {}", self.lambda_cls);
        let _ = writeln!(s, "lambda_clin = {}", self.lambda_clin);
        let _ = writeln!(s, "lambda_adv = {}", self.rlar.lambda_adv);
        let _ = writeln!(s, "epsilon = {}", self.rlar.epsilon);
        let _ = writeln!(s, "norm_guard = {}", self.rlar.norm_guard);
        let _ = writeln!(s, "tasks = {}", tasks.join(","));
        let _ = writeln!(s, "hook_mode = {}", self.rlar.hook_mode.name());
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", self.steps_per_epoch);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "folds = {}", self.folds);
        let _ = writeln!(s, "fold = {}", self.fold);
        let _ = writeln!(s, "selection_metric = {}", self.selection_metric.name());
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {d}");
        }
        let _ = writeln!(s, "synthetic_cases = {}", self.synthetic_cases);
        let _ = writeln!(s, "synthetic_seed = {}", self.synthetic_seed);
        s
    }
}
