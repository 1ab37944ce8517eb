//! Run directories: a binary parameter checkpoint plus JSON/CSV sidecars.
//!
//! `model.ckpt` layout (little-endian): the magic `RLARCKPT1`, a `u32` array
//! count, then per array a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` × `u32` dims and the `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::train::{log_csv, RunArtifacts};
use super::{HarnessError, TrainConfig};
use crate::features::StandardizationStats;
use crate::gradcore::Tensor;
use crate::model::ModelState;

pub const MAGIC: &[u8; 9] = b"RLARCKPT1";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const VAL_METRICS_FILE: &str = "val_metrics.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Everything in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: TrainConfig,
    pub class_weights: Vec<f64>,
    pub clin_stats: StandardizationStats,
    pub best_epoch: usize,
    pub selection_history: Vec<f64>,
    pub fold_assignments: Vec<(String, usize)>,
    pub train_size: usize,
    pub val_size: usize,
    pub majority_baseline_f1: f64,
    pub val_metrics: MetricsReport,
}

impl RunInfo {
    pub fn from_artifacts(run: &RunArtifacts) -> Self {
        Self {
            config: run.config.clone(),
            class_weights: run.class_weights.clone(),
            clin_stats: run.state.clin_stats.clone(),
            best_epoch: run.best_epoch,
            selection_history: run.selection_history.clone(),
            fold_assignments: run.fold_assignments.clone(),
            train_size: run.train_size,
            val_size: run.val_size,
            majority_baseline_f1: run.majority_baseline_f1,
            val_metrics: run.val_metrics.clone(),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

pub fn encode_checkpoint(params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "parameter name is not UTF-8")?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let raw = r.take(numel.checked_mul(4).ok_or("dims overflow")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

/// Writes the checkpoint, `run.json`, `train_log.csv`, `val_metrics.json`
/// and `config.txt` into `dir` (created if needed).
pub fn save_run(dir: &Path, run: &RunArtifacts) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io(&p))
    };
    write(CHECKPOINT_FILE, &encode_checkpoint(&run.state.params))?;
    write(RUN_FILE, serde_json::to_string_pretty(&RunInfo::from_artifacts(run))?.as_bytes())?;
    write(LOG_FILE, log_csv(&run.epochs).as_bytes())?;
    write(VAL_METRICS_FILE, serde_json::to_string_pretty(&run.val_metrics)?.as_bytes())?;
    write(CONFIG_FILE, run.config.to_text().as_bytes())?;
    Ok(())
}

/// Reads back a directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(RunInfo, ModelState), HarnessError> {
    let ckpt: PathBuf = dir.join(CHECKPOINT_FILE);
    let bad = |path: &Path, detail: String| HarnessError::Checkpoint { path: path.to_path_buf(), detail };
    let bytes = fs::read(&ckpt).map_err(io(&ckpt))?;
    let params = decode_checkpoint(&bytes).map_err(|d| bad(&ckpt, d))?;
    let info_path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&info_path).map_err(io(&info_path))?;
    let info: RunInfo = serde_json::from_str(&text).map_err(|e| bad(&info_path, e.to_string()))?;
    let state = ModelState::from_named(params, info.clin_stats.clone()).map_err(|e| bad(&ckpt, e.to_string()))?;
    if !state.is_finite() {
        return Err(bad(&ckpt, "non-finite parameter values".into()));
    }
    Ok((info, state))
}
