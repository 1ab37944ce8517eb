//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlar_core::features::glcm::{glcm, Quantized, BACKGROUND, DEFAULT_OFFSETS};
use rlar_core::features::{extract_features, Image, Mask, NUM_FEATURES};
use rlar_core::gradcore::{check, Graph, Tensor};
use rlar_core::harness::checkpoint::{load_run, save_run, VAL_METRICS_FILE};
use rlar_core::harness::metrics::hd95;
use rlar_core::harness::train::{evaluate_samples, split_indices, train, zero_classifier_column, RunArtifacts};
use rlar_core::harness::{class_weights, gen_synthetic, Dataset, Sample, TrainConfig};
use rlar_core::model::{clin_loss, dice_loss, forward, predict, weighted_ce, ModelState, Section, HOOK_BOTTLENECK};
use rlar_core::rlar::{adversarial_directions, pairwise_abs_cos, rlar_loss, rlar_penalty, HookMode, RlarConfig, Task};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- autodiff

fn autodiff_suite() -> Outcome {
    let t = Instant::now();
    let reports = check::run_suite(2026, 20);
    let elapsed = t.elapsed().as_secs_f64();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:.2e})", r.name, r.max_err)).collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    let fd = reports.iter().filter(|r| r.tolerance == check::OP_TOLERANCE);
    let worst = fd.clone().map(|r| r.max_err).fold(0.0, f64::max);
    ensure(fd.clone().all(|r| r.trials >= 20), || "fewer than 20 trials".into())?;
    let quad = reports
        .iter()
        .find(|r| r.name.starts_with("double_backward"))
        .ok_or("no double-backward quadratic check")?;
    ensure(quad.tolerance <= 1e-8 && quad.passed(), || format!("quadratic err {:.2e}", quad.max_err))?;
    ensure(elapsed < 60.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "{} checks, worst FD rel err {worst:.2e} < 1e-4, AᵀAx err {:.2e} < 1e-8, {elapsed:.1}s < 60s",
        reports.len(),
        quad.max_err
    ))
}

// ---------------------------------------------------------------- features

/// Pair counting straight from the definition: every ordered pixel pair
/// `(p, p + d)` inside the region for each offset, tallied in both orders.
fn glcm_oracle(q: &Quantized) -> Vec<f64> {
    let n = q.n_levels;
    let mut counts = vec![0u64; n * n];
    let coords: Vec<(isize, isize)> = (0..q.height as isize).flat_map(|r| (0..q.width as isize).map(move |c| (r, c))).collect();
    let level = |r: isize, c: isize| q.levels[r as usize * q.width + c as usize];
    for &(r1, c1) in &coords {
        for &(r2, c2) in &coords {
            if !DEFAULT_OFFSETS.contains(&(r2 - r1, c2 - c1)) {
                continue;
            }
            let (a, b) = (level(r1, c1), level(r2, c2));
            if a == BACKGROUND || b == BACKGROUND {
                continue;
            }
            counts[a as usize * n + b as usize] += 1;
            counts[b as usize * n + a as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&k| k as f64 / total as f64).collect()
}

fn feature_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut compared = 0;
    while compared < 100 {
        let n_levels = rng.gen_range(2..=8);
        let pixels: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let mask: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.7)).collect();
        let q = Quantized::from_masked(&pixels, &mask, 8, 8, n_levels);
        let want = glcm_oracle(&q);
        if want.iter().any(|v| v.is_nan()) {
            continue; // no in-region pair
        }
        let got = glcm(&q, &DEFAULT_OFFSETS).map_err(|e| e.to_string())?;
        ensure(got.p == want, || format!("GLCM mismatch on image {compared}"))?;
        compared += 1;
    }

    let feats = |h: usize, w: usize, inside: &dyn Fn(usize, usize) -> bool| {
        let mask = Mask::new(h, w, (0..h * w).map(|i| inside(i / w, i % w)).collect());
        let image = Image::new(h, w, mask.pixels.iter().map(|&m| if m { 0.5 } else { 0.0 }).collect());
        extract_features(&image, &mask).map_err(|e| e.to_string())
    };
    let close = |f: &rlar_core::features::FeatureVector, name: &str, want: f64| {
        let v = f.get(name).unwrap();
        ensure((v - want).abs() < 1e-9, || format!("{name} = {v}, expected {want}"))
    };
    let sq = feats(16, 16, &|r, c| (3..13).contains(&r) && (3..13).contains(&c))?;
    close(&sq, "circularity", std::f64::consts::FRAC_PI_4)?;
    for (name, want) in [("aspect_ratio", 1.0), ("mean", 0.5), ("entropy", 0.0), ("glcm_contrast", 0.0), ("glcm_energy", 1.0), ("glcm_entropy", 0.0)] {
        close(&sq, name, want)?;
    }
    let rect = feats(28, 16, &|r, c| (4..24).contains(&r) && (3..13).contains(&c))?;
    close(&rect, "aspect_ratio", 2.0)?;
    close(&rect, "elongation2d", 0.5)?;
    let disk = feats(48, 48, &|r, c| {
        let (dr, dc) = (r as f64 - 23.5, c as f64 - 23.5);
        dr * dr + dc * dc <= 400.0
    })?;
    let (circ, ell) = (disk.get("circularity").unwrap(), disk.get("ellipticity").unwrap());
    ensure((0.85..=1.05).contains(&circ), || format!("disk circularity {circ}"))?;
    ensure((0.97..=1.0).contains(&ell), || format!("disk ellipticity {ell}"))?;
    let elapsed = t.elapsed().as_secs_f64();
    ensure(elapsed < 30.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "GLCM exact on 100 random 8x8 images; square/rectangle exact; disk circularity {circ:.4}, ellipticity {ell:.4}; {elapsed:.2}s < 30s"
    ))
}

// ---------------------------------------------------------------- RLAR geometry

struct Batch {
    x: Tensor,
    mask: Tensor,
    labels: Vec<usize>,
    target: Tensor,
}

fn random_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s) = (3, 16);
    Batch {
        x: Tensor::from_fn(&[b, 1, s, s], |_| rng.gen()),
        mask: Tensor::from_fn(&[b, s, s], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }),
        labels: (0..b).map(|_| rng.gen_range(0..5)).collect(),
        target: Tensor::from_fn(&[b, NUM_FEATURES], |_| rng.gen_range(-1.0..1.0)),
    }
}

fn penalty(state: &ModelState, batch: &Batch, cfg: &RlarConfig) -> Result<f64, String> {
    let g = Graph::new();
    let out = forward(&state.bind(&g), g.constant(batch.x.clone())).map_err(|e| e.to_string())?;
    let losses = [
        (Task::Seg, dice_loss(out.seg, g.constant(batch.mask.clone())).map_err(|e| e.to_string())?),
        (Task::Cls, weighted_ce(out.logits, &batch.labels, &[1.0, 2.0, 0.5, 1.5, 1.0]).map_err(|e| e.to_string())?),
        (Task::Clin, clin_loss(out.h_tirads().map_err(|e| e.to_string())?, g.constant(batch.target.clone())).map_err(|e| e.to_string())?),
    ];
    Ok(rlar_loss(&losses, &out, cfg).map_err(|e| e.to_string())?.loss.item())
}

fn rlar_suite() -> Outcome {
    let t = Instant::now();
    let state = ModelState::init(21);
    let batch = random_batch(21);

    // ε-invariance
    let mut worst_eps = 0.0f64;
    for mode in [HookMode::Bottleneck, HookMode::MeanLast3] {
        let v: Vec<f64> = [0.01, 1.0, 100.0]
            .iter()
            .map(|&epsilon| penalty(&state, &batch, &RlarConfig { epsilon, hook_mode: mode, ..Default::default() }))
            .collect::<Result<_, _>>()?;
        ensure(v[0] > 0.0, || "zero penalty".into())?;
        worst_eps = worst_eps.max((v[0] - v[1]).abs()).max((v[1] - v[2]).abs());
    }
    ensure(worst_eps <= 1e-10, || format!("ε-dependence {worst_eps:.2e}"))?;

    // bound and rescaling invariance on random direction sets
    let lambda = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_scale = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=3);
        let b = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=6);
        let g = Graph::new();
        let raw: Vec<Tensor> = (0..k)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    Tensor::zeros(&[b, d])
                } else {
                    Tensor::from_fn(&[b, d], |_| rng.gen_range(-1.0..1.0))
                }
            })
            .collect();
        let dirs: Vec<(Task, _)> = raw.iter().enumerate().map(|(i, t)| (Task::ALL[i], g.constant(t.clone()))).collect();
        let pairs = pairwise_abs_cos(&dirs).map_err(|e| e.to_string())?;
        let v = rlar_penalty(&pairs, lambda).map_err(|e| e.to_string())?.item();
        ensure((0.0..=lambda).contains(&v), || format!("penalty {v} outside [0, {lambda}]"))?;
        let scaled: Vec<(Task, _)> = raw
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let s = 10f64.powf(rng.gen_range(-3.0..3.0));
                (Task::ALL[i], g.constant(t.map(|x| x * s)))
            })
            .collect();
        let scaled_pairs = pairwise_abs_cos(&scaled).map_err(|e| e.to_string())?;
        for (a, b) in pairs.iter().zip(&scaled_pairs) {
            let (a, b) = (a.per_sample.value(), b.per_sample.value());
            worst_scale = worst_scale.max(a.max_abs_diff(&b));
        }
    }
    ensure(worst_scale <= 1e-10, || format!("rescaling changed |cos| by {worst_scale:.2e}"))?;

    // hand example
    let g = Graph::new();
    let e = |i: usize| g.constant(Tensor::new(vec![1, 2], if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).unwrap());
    let hand = rlar_penalty(
        &pairwise_abs_cos(&[(Task::Seg, e(0)), (Task::Cls, e(1)), (Task::Clin, e(0))]).map_err(|e| e.to_string())?,
        lambda,
    )
    .map_err(|e| e.to_string())?
    .item();
    ensure(hand == lambda / 3.0, || format!("(e1,e2,e1) gave {hand}, expected {}", lambda / 3.0))?;

    // the penalty reaches encoder parameters only through create-graph gradients
    let g = Graph::new();
    let p = state.bind(&g);
    let out = forward(&p, g.constant(batch.x.clone())).map_err(|e| e.to_string())?;
    let losses = [
        (Task::Seg, dice_loss(out.seg, g.constant(batch.mask.clone())).map_err(|e| e.to_string())?),
        (Task::Cls, weighted_ce(out.logits, &batch.labels, &[1.0; 5]).map_err(|e| e.to_string())?),
    ];
    let rep = out.hook(HOOK_BOTTLENECK).ok_or("no bottleneck hook")?;
    let encoder = p.section(Section::Encoder);
    let penalty_with = |create_graph: bool| -> Result<_, String> {
        let dirs = adversarial_directions(&losses, rep, 1.0, 1e-8, create_graph).map_err(|e| e.to_string())?;
        rlar_penalty(&pairwise_abs_cos(&dirs).map_err(|e| e.to_string())?, lambda).map_err(|e| e.to_string())
    };
    let live = g.grad(penalty_with(true)?, &encoder, false).map_err(|e| e.to_string())?;
    let live_norm: f64 = live.values().iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
    ensure(live_norm > 0.0, || "penalty gradient vanished with create_graph on".into())?;
    let dead = g.grad(penalty_with(false)?, &encoder, false).map_err(|e| e.to_string())?;
    ensure(dead.all_unreachable() && dead.values().iter().all(|t| t.norm() == 0.0), || {
        "detached penalty still has an encoder gradient".into()
    })?;

    let elapsed = t.elapsed().as_secs_f64();
    ensure(elapsed < 30.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "ε spread {worst_eps:.1e}; 1000 sets within [0, λ]; rescaling drift {worst_scale:.1e}; (e1,e2,e1) = λ/3 exactly; \
         encoder grad norm {live_norm:.2e} live vs 0 detached; {elapsed:.2}s < 30s"
    ))
}

// ---------------------------------------------------------------- class weights

fn class_weight_check() -> Outcome {
    let w = class_weights(&[70, 942, 3050, 2949, 2530]).map_err(|e| e.to_string())?;
    let want = [27.26, 2.026, 0.6257, 0.6471, 0.7543];
    let worst = w.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-3, || format!("weights {w:?}, max deviation {worst:.2e}"))?;
    Ok(format!("weights {:?}, max deviation {worst:.1e} ≤ 1e-3", w.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()))
}

// ---------------------------------------------------------------- HD95

fn boundary_points(m: &Mask) -> Vec<(f64, f64)> {
    let (h, w) = (m.height as isize, m.width as isize);
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m.at(r as usize, c as usize);
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if fg(r, c) && (-1..=1).any(|dr| (-1..=1).any(|dc| !fg(r + dr, c + dc))) {
                pts.push((r as f64, c as f64));
            }
        }
    }
    pts
}

fn hd95_oracle(a: &Mask, b: &Mask) -> f64 {
    let (pa, pb) = (boundary_points(a), boundary_points(b));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
    let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).chain(pb.iter().map(|p| nearest(p, &pa))).collect();
    d.sort_by(|x, y| x.total_cmp(y));
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut px = vec![false; h * w];
    for _ in 0..rng.gen_range(1..=3) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rr, cr) = (rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = ((r as f64 - r0 as f64) / rr, (c as f64 - c0 as f64) / cr);
                if dr * dr + dc * dc <= 1.0 {
                    px[r * w + c] = true;
                }
            }
        }
    }
    Mask::new(h, w, px)
}

fn hd95_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(8..=16), rng.gen_range(8..=16));
        let (a, b) = (random_shape(&mut rng, h, w), random_shape(&mut rng, h, w));
        worst = worst.max((hd95(&a, &b) - hd95_oracle(&a, &b)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation from oracle {worst:.2e}"))?;
    let mut a = Mask::empty(9, 9);
    let mut b = Mask::empty(9, 9);
    a.pixels[2 * 9 + 1] = true;
    b.pixels[2 * 9 + 6] = true;
    let two = hd95(&a, &b);
    ensure(two == 5.0, || format!("two-pixel case gave {two}"))?;
    Ok(format!("20 random shapes within {worst:.1e} of the oracle; two-pixel case = {two}"))
}

// ---------------------------------------------------------------- training

fn benchmark_config(seed: u64, lambda_adv: f64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.rlar.lambda_adv = lambda_adv;
    cfg
}

fn val_samples<'a>(cfg: &TrainConfig, data: &'a Dataset) -> Vec<&'a Sample> {
    let (_, val, _) = split_indices(cfg, data).expect("split");
    val.iter().map(|&i| &data.samples[i]).collect()
}

/// Runs the smoke benchmark twice, re-evaluating each saved run from disk.
fn smoke(data: &Dataset) -> Result<(String, RunArtifacts), String> {
    let cfg = benchmark_config(3, 0.1);
    let t = Instant::now();
    let mut outputs = Vec::new();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let run = train(&cfg, data).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        save_run(dir.path(), &run).map_err(|e| e.to_string())?;
        let (_, state) = load_run(dir.path()).map_err(|e| e.to_string())?;
        let metrics = evaluate_samples(&state, &val_samples(&cfg, data)).map_err(|e| e.to_string())?;
        let json = serde_json::to_vec_pretty(&metrics).map_err(|e| e.to_string())?;
        let stored = std::fs::read(dir.path().join(VAL_METRICS_FILE)).map_err(|e| e.to_string())?;
        ensure(json == stored, || "re-evaluated metrics differ from the run's own".into())?;
        outputs.push(json);
        runs.push(run);
    }
    let elapsed = t.elapsed().as_secs_f64();
    let run = runs.pop().expect("two runs");
    let m = &run.val_metrics;
    ensure(run.train_size == 512 && run.val_size == 128, || format!("split {}/{}", run.train_size, run.val_size))?;
    ensure(outputs[0] == outputs[1], || "metrics.json differs between identical runs".into())?;
    ensure(m.dice >= 0.80, || format!("val Dice {:.4} < 0.80", m.dice))?;
    let need = run.majority_baseline_f1 + 0.15;
    ensure(m.f1_macro >= need, || format!("macro-F1 {:.4} < baseline {:.4} + 0.15", m.f1_macro, run.majority_baseline_f1))?;
    ensure(elapsed < 600.0, || format!("two runs took {elapsed:.0}s"))?;
    Ok((
        format!(
            "512/128 split, best epoch {}: Dice {:.4} ≥ 0.80, macro-F1 {:.4} ≥ {:.4} (baseline + 0.15), metrics.json bit-identical, {:.0}s for two runs",
            run.best_epoch, m.dice, m.f1_macro, need, elapsed
        ),
        run,
    ))
}

fn ablation_exactness(run: &RunArtifacts, data: &Dataset) -> Outcome {
    let samples = val_samples(&run.config, data);
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let base = predict(&run.state, &images).map_err(|e| e.to_string())?;
    let w = run.state.get("cls.w").ok_or("no classifier weight")?;
    let cols = w.shape()[1];
    let mut worst = 0.0f64;
    for k in 0..NUM_FEATURES {
        let ablated = predict(&zero_classifier_column(&run.state, k).map_err(|e| e.to_string())?, &images).map_err(|e| e.to_string())?;
        for (b, a) in base.iter().zip(&ablated) {
            for c in 0..b.logits.len() {
                let want = -w.data()[c * cols + k] * b.embedding[k];
                worst = worst.max((a.logits[c] - b.logits[c] - want).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("{} samples × {NUM_FEATURES} columns, max |Δlogit + W[:,k]·h_k| = {worst:.1e} ≤ 1e-9", samples.len()))
}

fn final_cos(run: &RunArtifacts) -> f64 {
    let tail = &run.epochs[run.epochs.len().saturating_sub(10)..];
    tail.iter().map(|e| e.mean_cos()).sum::<f64>() / tail.len() as f64
}

fn rlar_effect(data: &Dataset, seed3: &RunArtifacts) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [1, 2, 3] {
        let with = if seed == 3 { seed3.clone() } else { train(&benchmark_config(seed, 0.1), data).map_err(|e| e.to_string())? };
        let without = train(&benchmark_config(seed, 0.0), data).map_err(|e| e.to_string())?;
        let (cw, c0) = (final_cos(&with), final_cos(&without));
        let (dw, d0) = (with.val_metrics.dice, without.val_metrics.dice);
        lines.push(format!("seed {seed}: |cos| {cw:.4} vs {c0:.4}, Dice {dw:.4} vs {d0:.4}"));
        if !(cw < c0) {
            failures.push(format!("seed {seed}: |cos| not lower ({cw:.4} ≥ {c0:.4})"));
        }
        if (dw - d0).abs() > 0.05 {
            failures.push(format!("seed {seed}: Dice gap {:.4} > 0.05", (dw - d0).abs()));
        }
    }
    let detail = lines.join("; ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, outcome));
    };
    report("1 autodiff suite", autodiff_suite());
    report("2 feature oracle suite", feature_suite());
    report("3 RLAR geometry suite", rlar_suite());
    report("5 class weights", class_weight_check());
    report("8 HD95 oracle", hd95_check());

    let data = gen_synthetic(640, 32, 3).expect("synthetic benchmark");
    match smoke(&data) {
        Ok((detail, run)) => {
            report("6 synthetic end-to-end smoke", Ok(detail));
            report("4 feature-ablation exactness", ablation_exactness(&run, &data));
            report("7 RLAR effect", rlar_effect(&data, &run));
        }
        Err(e) => {
            report("6 synthetic end-to-end smoke", Err(e));
            let state = ModelState::init(3);
            let fallback = RunArtifacts {
                config: benchmark_config(3, 0.1),
                state,
                class_weights: vec![1.0; 5],
                epochs: vec![],
                steps: vec![],
                val_metrics: rlar_core::harness::MetricsReport::compute(&[], &[], &[]),
                fold_assignments: vec![],
                selection_history: vec![],
                best_epoch: 0,
                train_size: 0,
                val_size: 0,
                majority_baseline_f1: 0.0,
            };
            report("4 feature-ablation exactness", ablation_exactness(&fallback, &data));
            report("7 RLAR effect", Err("skipped: smoke run failed".into()));
        }
    }

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
