use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rlar_core::features::{csv_header, csv_row, extract_features, FEATURE_NAMES};
use rlar_core::gradcore::check;
use rlar_core::harness::checkpoint::{load_run, save_run, RunInfo, LOG_FILE};
use rlar_core::harness::train::{ablate_features, ablation_csv, evaluate_samples, train_with_progress};
use rlar_core::harness::{gen_synthetic, load_dataset, read_image, read_mask, train_folds, write_dataset, Dataset, HarnessError, TrainConfig};

#[derive(Parser)]
#[command(name = "rlar", version, about = "Multitask nodule segmentation and risk grading experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 640)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Print the 13 radiomics values of one image/mask pair.
    Features {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (overrides `data_dir` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Validation folds to train, comma separated, or `all`; several folds
        /// go to `OUT/fold<k>`.
        #[arg(long)]
        folds: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a saved run; without --data, on its own validation split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to RUN/metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero each radiomics classifier column in turn and report metric deltas.
    AblateFeatures {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to RUN/feature_ablation.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference and second-order gradient checks for every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Per-epoch pairwise |cos| summary of a run's training log.
    ConflictReport {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Marks failures that exit with status 2.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<Numerical>().is_some() || c.downcast_ref::<HarnessError>().is_some_and(|h| h.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, n, size, seed } => gen_data(&out, n, size, seed),
        Command::Features { image, mask, json } => features(&image, &mask, json),
        Command::Train { config, out, data, seed, folds, jobs } => {
            train_cmd(&config, &out, data.as_deref(), seed, folds.as_deref(), jobs)
        }
        Command::Eval { run, data, out } => eval(&run, data.as_deref(), out),
        Command::AblateFeatures { run, data, out } => ablate(&run, data.as_deref(), out),
        Command::Gradcheck { seed, trials } => gradcheck(seed, trials),
        Command::ConflictReport { run } => conflict_report(&run),
    }
}

fn gen_data(out: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    if out.join("labels.csv").exists() {
        bail!("{} already contains a dataset", out.display());
    }
    let data = gen_synthetic(n, size, seed)?;
    write_dataset(&data, out)?;
    println!("wrote {} samples ({size}x{size}) to {}", data.len(), out.display());
    Ok(())
}

fn features(image: &Path, mask: &Path, json: bool) -> Result<()> {
    let img = read_image(image)?;
    let m = read_mask(mask)?;
    let fv = extract_features(&img, &m).with_context(|| format!("{}", image.display()))?;
    if json {
        let map: serde_json::Map<String, serde_json::Value> =
            FEATURE_NAMES.iter().zip(fv.0).map(|(k, v)| (k.to_string(), v.into())).collect();
        println!("{}", serde_json::to_string_pretty(&map)?);
    } else {
        let name = image.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{}\n{}", csv_header(), csv_row(&name, &fv));
    }
    Ok(())
}

fn load_data(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir.map(Path::to_path_buf).or_else(|| cfg.data_dir.as_ref().map(PathBuf::from)) {
        Some(d) => Ok(load_dataset(&d)?),
        None => Ok(gen_synthetic(cfg.synthetic_cases, cfg.image_size, cfg.synthetic_seed)?),
    }
}

fn parse_folds(spec: &str, k: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..k).collect());
    }
    let folds = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("invalid fold {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if let Some(f) = folds.iter().find(|&&f| f >= k) {
        bail!("fold {f} out of range for {k} folds");
    }
    Ok(folds)
}

fn summary(info: &RunInfo) -> String {
    let m = &info.val_metrics;
    format!(
        "fold {}: best epoch {} dice {:.4} iou {:.4} hd95 {:.3} macro-F1 {:.4} (majority baseline {:.4})",
        info.config.fold, info.best_epoch, m.dice, m.iou, m.hd95, m.f1_macro, info.majority_baseline_f1
    )
}

fn train_cmd(config: &Path, out: &Path, data: Option<&Path>, seed: Option<u64>, folds: Option<&str>, jobs: usize) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("cannot read config {}", config.display()))?;
    let mut cfg = TrainConfig::parse(&text).with_context(|| format!("{}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = load_data(&cfg, data)?;
    let folds = match folds {
        Some(f) => parse_folds(f, cfg.folds)?,
        None => vec![cfg.fold],
    };
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    if let [fold] = folds[..] {
        let cfg = TrainConfig { fold, ..cfg };
        let run = train_with_progress(&cfg, &dataset, |e| {
            eprintln!(
                "epoch {:>3}  L_total {:.4}  L_rlar {:.5}  |cos| {:.4}/{:.4}/{:.4}  val dice {:.4}  macro-F1 {:.4}",
                e.epoch, e.l_total, e.l_rlar, e.cos[0], e.cos[1], e.cos[2], e.val_dice, e.val_macro_f1
            )
        })?;
        save_run(out, &run)?;
        println!("{}", summary(&RunInfo::from_artifacts(&run)));
        return Ok(());
    }
    let results = train_folds(&cfg, &dataset, &folds, jobs);
    let mut first_err = None;
    for (fold, r) in folds.iter().zip(results) {
        match r {
            Ok(run) => {
                save_run(&out.join(format!("fold{fold}")), &run)?;
                println!("{}", summary(&RunInfo::from_artifacts(&run)));
            }
            Err(e) => {
                eprintln!("fold {fold}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// The run's own validation split, rebuilt from its config.
fn run_samples(info: &RunInfo, data: Option<&Path>) -> Result<Dataset> {
    let dataset = load_data(&info.config, data)?;
    if data.is_some() {
        return Ok(dataset);
    }
    let val: std::collections::HashSet<&str> =
        info.fold_assignments.iter().filter(|(_, f)| *f == info.config.fold).map(|(id, _)| id.as_str()).collect();
    let idx: Vec<usize> = (0..dataset.len()).filter(|&i| val.contains(dataset.samples[i].case_id.as_str())).collect();
    Ok(dataset.subset(&idx))
}

fn eval(run: &Path, data: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (info, state) = load_run(run)?;
    let dataset = run_samples(&info, data)?;
    let refs: Vec<_> = dataset.samples.iter().collect();
    let metrics = evaluate_samples(&state, &refs)?;
    let out = out.unwrap_or_else(|| run.join("metrics.json"));
    fs::write(&out, serde_json::to_string_pretty(&metrics)?).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "{} samples: dice {:.4} iou {:.4} hd95 {:.3} precision {:.4} recall {:.4} macro-F1 {:.4} -> {}",
        metrics.n_samples,
        metrics.dice,
        metrics.iou,
        metrics.hd95,
        metrics.precision_macro,
        metrics.recall_macro,
        metrics.f1_macro,
        out.display()
    );
    Ok(())
}

fn ablate(run: &Path, data: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (info, state) = load_run(run)?;
    let dataset = run_samples(&info, data)?;
    let rows = ablate_features(&state, &dataset)?;
    let csv = ablation_csv(&rows);
    let out = out.unwrap_or_else(|| run.join("feature_ablation.csv"));
    fs::write(&out, &csv).with_context(|| format!("cannot write {}", out.display()))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(seed: u64, trials: usize) -> Result<()> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let reports = check::run_suite(seed, trials);
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<34} max_err {:.3e}  tol {:.0e}  trials {:>3}  {status}", r.name, r.max_err, r.tolerance, r.trials);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Numerical(format!("gradient check failed for: {}", failed.join(", "))).into())
    }
}

fn conflict_report(run: &Path) -> Result<()> {
    let path = run.join(LOG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("{}: empty log", path.display()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| anyhow!("{}: no column {name}", path.display()));
    let cols = [col("epoch")?, col("cos_seg_cls")?, col("cos_seg_clin")?, col("cos_cls_clin")?, col("L_rlar")?];
    println!("{:>5}  {:>11}  {:>12}  {:>12}  {:>9}  {:>9}", "epoch", "seg~cls", "seg~clin", "cls~clin", "mean", "L_rlar");
    let mut means = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let get = |k: usize| -> Result<f64> {
            f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| anyhow!("{}: bad row {}", path.display(), i + 2))
        };
        let (a, b, c) = (get(cols[1])?, get(cols[2])?, get(cols[3])?);
        let mean = (a + b + c) / 3.0;
        means.push(mean);
        println!("{:>5}  {a:>11.5}  {b:>12.5}  {c:>12.5}  {mean:>9.5}  {:>9.5}", get(cols[0])?, get(cols[4])?);
    }
    if means.is_empty() {
        bail!("{}: no epochs logged", path.display());
    }
    let tail = &means[means.len().saturating_sub(10)..];
    println!("mean pair-averaged |cos| over the final {} epochs: {:.6}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(())
}
