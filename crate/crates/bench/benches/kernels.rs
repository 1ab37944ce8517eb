use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rlar_core::features::{extract_features, Image, Mask};
use rlar_core::gradcore::{Graph, Tensor};
use rlar_core::harness::gen_synthetic;
use rlar_core::harness::metrics::hd95;
use rlar_core::model::{dice_loss, forward, predict, ModelState};

fn ramp(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5)
}

fn autodiff(c: &mut Criterion) {
    let (a, b) = (ramp(&[64, 64]), ramp(&[64, 64]));
    c.bench_function("matmul 64x64 fwd+bwd", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let (x, y) = (g.param(a.clone()), g.param(b.clone()));
            let loss = x.matmul(y).unwrap().sum().unwrap();
            black_box(g.grad(loss, &[x, y], false).unwrap());
        })
    });
    let (x0, w0) = (ramp(&[8, 16, 16, 16]), ramp(&[32, 16, 3, 3]));
    c.bench_function("conv2d 8x16x16x16 -> 32 fwd+bwd", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let (x, w) = (g.param(x0.clone()), g.param(w0.clone()));
            let loss = x.conv2d(w, 1, 1).unwrap().sum().unwrap();
            black_box(g.grad(loss, &[x, w], false).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let state = ModelState::init(1);
    let x = ramp(&[8, 1, 32, 32]);
    let target = Tensor::from_fn(&[8, 32, 32], |i| if (i / 32) % 32 > 10 && i % 32 > 10 { 1.0 } else { 0.0 });
    c.bench_function("model forward+backward, batch 8 @ 32x32", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let p = state.bind(&g);
            let out = forward(&p, g.constant(x.clone())).unwrap();
            let loss = dice_loss(out.seg, g.constant(target.clone())).unwrap();
            black_box(g.grad(loss, &p.all(), false).unwrap());
        })
    });
    let data = gen_synthetic(32, 32, 1).unwrap();
    let images: Vec<&Image> = data.samples.iter().map(|s| &s.image).collect();
    c.bench_function("predict 32 images", |bench| bench.iter(|| black_box(predict(&state, &images).unwrap())));
}

fn features_and_metrics(c: &mut Criterion) {
    let data = gen_synthetic(16, 64, 2).unwrap();
    let s = &data.samples[0];
    c.bench_function("extract_features 64x64", |bench| bench.iter(|| black_box(extract_features(&s.image, &s.mask).unwrap())));
    let shifted = Mask::new(64, 64, (0..64 * 64).map(|i| i >= 64 && s.mask.pixels[i - 64]).collect());
    c.bench_function("hd95 64x64", |bench| bench.iter(|| black_box(hd95(&s.mask, &shifted))));
}

criterion_group!(benches, autodiff, model, features_and_metrics);
criterion_main!(benches);
