use super::*;
use rand::{Rng, SeedableRng};

fn random_input(b: usize, s: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 1, s, s], |_| rng.gen_range(0.0..1.0))
}

fn random_mask(b: usize, s: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, s, s], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
}

#[test]
fn output_shapes() {
    let state = ModelState::init(1);
    let g = Graph::new();
    let p = state.bind(&g);
    let out = forward(&p, g.constant(random_input(2, 32, 0))).unwrap();
    assert_eq!(out.seg.shape(), vec![2, 32, 32]);
    assert_eq!(out.logits.shape(), vec![2, NUM_CLASSES]);
    assert_eq!(out.embedding.shape(), vec![2, EMBED_DIM]);
    assert_eq!(out.hook(HOOK_BOTTLENECK).unwrap().shape(), vec![2, 64, 2, 2]);
    assert_eq!(out.hook(HOOK_LAST).unwrap().shape(), vec![2, 64, 2, 2]);
    assert_eq!(out.hook(HOOK_MID).unwrap().shape(), vec![2, 16, 8, 8]);
    assert_eq!(out.h_tirads().unwrap().shape(), vec![2, NUM_FEATURES]);
    assert!(out.seg.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn rejects_indivisible_input() {
    let state = ModelState::init(1);
    let g = Graph::new();
    let p = state.bind(&g);
    let err = forward(&p, g.constant(random_input(1, 24, 0))).err().unwrap();
    assert_eq!(err, ModelError::IndivisibleInput { h: 24, w: 24 });
}

#[test]
fn zero_parameters_give_bias_logits_and_half_mask() {
    let mut state = ModelState::zeros();
    let bias = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.5]);
    *state.get_mut("cls.b").unwrap() = bias.clone();
    let g = Graph::new();
    let out = forward(&state.bind(&g), g.constant(random_input(3, 16, 4))).unwrap();
    for row in out.logits.value().data().chunks(NUM_CLASSES) {
        assert_eq!(row, bias.data());
    }
    assert!(out.seg.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn decoder_does_not_touch_head() {
    let state = ModelState::init(3);
    let mut perturbed = state.clone();
    for (spec, (_, t)) in param_specs().iter().zip(perturbed.params.iter_mut()) {
        if spec.section == Section::Decoder {
            *t = t.map(|v| v + 0.37);
        }
    }
    let x = random_input(2, 16, 9);
    let run = |s: &ModelState| {
        let g = Graph::new();
        let out = forward(&s.bind(&g), g.constant(x.clone())).unwrap();
        (out.logits.value().as_ref().clone(), out.embedding.value().as_ref().clone(), out.seg.value().as_ref().clone())
    };
    let (l0, h0, s0) = run(&state);
    let (l1, h1, s1) = run(&perturbed);
    assert_eq!(l0, l1);
    assert_eq!(h0, h1);
    assert_ne!(s0, s1);
}

#[test]
fn forward_is_deterministic() {
    let state = ModelState::init(5);
    let x = random_input(2, 16, 1);
    let run = || {
        let g = Graph::new();
        forward(&state.bind(&g), g.constant(x.clone())).unwrap().seg.value().as_ref().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn init_is_seeded_and_bounded() {
    assert_eq!(ModelState::init(11), ModelState::init(11));
    assert_ne!(ModelState::init(11), ModelState::init(12));
    for (spec, (_, t)) in param_specs().iter().zip(&ModelState::init(11).params) {
        let bound = (6.0 / spec.fan_in as f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound), "{}", spec.name);
        if spec.is_bias {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn from_named_validates() {
    let s = ModelState::init(0);
    assert_eq!(ModelState::from_named(s.params.clone(), s.clin_stats.clone()).unwrap(), s);
    let mut missing = s.params.clone();
    missing.pop();
    assert!(matches!(ModelState::from_named(missing, s.clin_stats.clone()), Err(ModelError::UnknownParam(_))));
    let mut bad = s.params.clone();
    bad[0].1 = Tensor::zeros(&[1]);
    assert!(matches!(ModelState::from_named(bad, s.clin_stats.clone()), Err(ModelError::ParamShape { .. })));
}

fn dice_of(pred: Vec<f64>, target: Vec<f64>, shape: &[usize]) -> f64 {
    let g = Graph::new();
    let p = g.constant(Tensor::new(shape.to_vec(), pred).unwrap());
    let t = g.constant(Tensor::new(shape.to_vec(), target).unwrap());
    dice_loss(p, t).unwrap().item()
}

#[test]
fn dice_examples() {
    let mut m = vec![0.0; 400];
    m[..50].iter_mut().for_each(|v| *v = 1.0);
    let same = dice_of(m.clone(), m.clone(), &[1, 20, 20]);
    assert!(same <= DICE_SMOOTH / (100.0 + DICE_SMOOTH) + 1e-15);

    let (mut a, mut b) = (vec![0.0; 400], vec![0.0; 400]);
    a[..100].iter_mut().for_each(|v| *v = 1.0);
    b[200..300].iter_mut().for_each(|v| *v = 1.0);
    assert!((dice_of(a, b, &[1, 20, 20]) - (1.0 - 1.0 / 201.0)).abs() < 1e-15);

    let a = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let b = vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    assert!((dice_of(a, b, &[1, 3, 3]) - (1.0 - 5.0 / 9.0)).abs() < 1e-15);
}

fn ce_of(logits: Vec<f64>, c: usize, labels: &[usize], w: &[f64]) -> f64 {
    let g = Graph::new();
    let l = g.constant(Tensor::new(vec![labels.len(), c], logits).unwrap());
    weighted_ce(l, labels, w).unwrap().item()
}

#[test]
fn weighted_ce_examples() {
    let uniform = ce_of(vec![0.3; 10], 5, &[0, 4], &[1.0, 9.0, 2.0, 3.0, 0.5]);
    assert!((uniform - 5f64.ln()).abs() < 1e-12);

    let confident = ce_of(vec![50.0, 0.0, 0.0, 0.0, 0.0], 5, &[0], &[1.0; 5]);
    assert!(confident < 1e-20);

    // two-class rows built so the per-sample NLLs are exactly 1 and 4
    let e = std::f64::consts::E;
    let row0 = [0.0, (e - 1.0).ln()]; // p0 = 1/e
    let row1 = [(e.powi(4) - 1.0).ln(), 0.0]; // p1 = 1/e^4
    let logits = vec![row0[0], row0[1], row1[0], row1[1]];
    let v = ce_of(logits, 2, &[0, 1], &[2.0, 1.0]);
    assert!((v - 2.0).abs() < 1e-12, "{v}");
}

#[test]
fn weighted_ce_rejects_bad_labels() {
    let g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 5]));
    assert_eq!(weighted_ce(l, &[5], &[1.0; 5]).err(), Some(ModelError::LabelOutOfRange { label: 5, classes: 5 }));
}

#[test]
fn clin_loss_examples() {
    let g = Graph::new();
    let h = g.constant(Tensor::from_fn(&[1, 13], |i| i as f64));
    assert_eq!(clin_loss(h, h).unwrap().item(), 0.0);
    let r = g.constant(Tensor::from_fn(&[1, 13], |i| i as f64 - 1.0));
    assert_eq!(clin_loss(h, r).unwrap().item(), 13.0);
    let mut d = vec![0.0; 26];
    d[0] = 2f64.sqrt();
    d[13] = 2.0;
    let h2 = g.constant(Tensor::new(vec![2, 13], d).unwrap());
    let z = g.constant(Tensor::zeros(&[2, 13]));
    assert!((clin_loss(h2, z).unwrap().item() - 3.0).abs() < 1e-12);
}

#[test]
fn losses_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = 6;
    let pred = Tensor::from_fn(&[b, 4, 4], |_| rng.gen_range(0.0..1.0));
    let mask = random_mask(b, 4, 2);
    let logits = Tensor::from_fn(&[b, 5], |_| rng.gen_range(-3.0..3.0));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..5)).collect();
    let w = [27.26, 2.0, 0.6, 0.65, 0.75];
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor| {
        let per = t.numel() / b;
        let data = perm.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    let g = Graph::new();
    let d0 = dice_loss(g.constant(pred.clone()), g.constant(mask.clone())).unwrap().item();
    let d1 = dice_loss(g.constant(permute(&pred)), g.constant(permute(&mask))).unwrap().item();
    assert!((d0 - d1).abs() < 1e-12);
    let c0 = weighted_ce(g.constant(logits.clone()), &labels, &w).unwrap().item();
    let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let c1 = weighted_ce(g.constant(permute(&logits)), &plabels, &w).unwrap().item();
    assert!((c0 - c1).abs() < 1e-12);
}

#[test]
fn clin_loss_never_reaches_decoder() {
    let state = ModelState::init(2);
    let g = Graph::new();
    let p = state.bind(&g);
    let out = forward(&p, g.constant(random_input(2, 16, 3))).unwrap();
    let target = g.constant(Tensor::zeros(&[2, NUM_FEATURES]));
    let loss = clin_loss(out.h_tirads().unwrap(), target).unwrap();
    let dec = g.grad(loss, &p.section(Section::Decoder), false).unwrap();
    assert!(dec.all_unreachable());
    assert!(dec.values().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    let enc = g.grad(loss, &p.section(Section::Encoder), false).unwrap();
    assert!(!enc.any_unreachable());
}

/// Central differences on 5 random coordinates of every tensor, for each
/// loss separately.
#[test]
fn loss_gradients_match_finite_differences() {
    let state = ModelState::init(21);
    let x = random_input(2, 16, 5);
    let mask = random_mask(2, 16, 6);
    let labels = [1usize, 3];
    let weights = [2.0, 0.5, 1.0, 1.5, 0.7];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let target = Tensor::from_fn(&[2, NUM_FEATURES], |_| rng.gen_range(-1.0..1.0));

    let loss_value = |s: &ModelState, which: usize| -> f64 {
        let g = Graph::new();
        let out = forward(&s.bind(&g), g.constant(x.clone())).unwrap();
        match which {
            0 => dice_loss(out.seg, g.constant(mask.clone())).unwrap().item(),
            1 => weighted_ce(out.logits, &labels, &weights).unwrap().item(),
            _ => clin_loss(out.h_tirads().unwrap(), g.constant(target.clone())).unwrap().item(),
        }
    };

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let g = Graph::new();
        let p = state.bind(&g);
        let out = forward(&p, g.constant(x.clone())).unwrap();
        let loss = match which {
            0 => dice_loss(out.seg, g.constant(mask.clone())).unwrap(),
            1 => weighted_ce(out.logits, &labels, &weights).unwrap(),
            _ => clin_loss(out.h_tirads().unwrap(), g.constant(target.clone())).unwrap(),
        };
        let grads = g.grad(loss, &p.all(), false).unwrap().values();
        for (k, (name, t)) in state.params.iter().enumerate() {
            for _ in 0..5 {
                let i = rng.gen_range(0..t.numel());
                let mut plus = state.clone();
                plus.params[k].1.data_mut()[i] += h;
                let mut minus = state.clone();
                minus.params[k].1.data_mut()[i] -= h;
                let numeric = (loss_value(&plus, which) - loss_value(&minus, which)) / (2.0 * h);
                let analytic = grads[k].data()[i];
                let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
                assert!(err < 1e-3, "loss {which} {name}[{i}]: analytic {analytic} numeric {numeric}");
                worst = worst.max(err);
            }
        }
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn predict_needs_only_images() {
    let state = ModelState::init(4);
    let imgs: Vec<Image> = (0..3)
        .map(|s| Image::new(16, 16, random_input(1, 16, s).into_data()))
        .collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let preds = predict(&state, &refs).unwrap();
    assert_eq!(preds.len(), 3);
    let g = Graph::new();
    let out = forward(&state.bind(&g), g.constant(images_to_tensor(&refs).unwrap())).unwrap();
    for (i, p) in preds.iter().enumerate() {
        assert_eq!(&p.logits[..], &out.logits.value().data()[i * 5..i * 5 + 5]);
        assert_eq!(p.class, argmax(&p.logits));
        assert_eq!(p.seg_prob.len(), 256);
    }
}
