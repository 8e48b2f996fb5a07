use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use hydra_peft::linalg::{matmul, svd};
use hydra_peft::{AdapterSpec, HydraLinear, Matrix, MicroTransformer, Mode, ModelConfig, Rng};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let mut rng = Rng::new(n as u64);
        let a = rng.gaussian_matrix(n, n, 1.0);
        let b = rng.gaussian_matrix(n, n, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    for n in [16, 32, 64] {
        let m = Rng::new(1).gaussian_matrix(n, n, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| svd(black_box(&m)).unwrap())
        });
    }
    group.finish();
}

fn adapted_layer(d: usize, r: usize) -> HydraLinear {
    let mut rng = Rng::new(3);
    let w0 = rng.gaussian_matrix(d, d, 0.1);
    let b0 = Matrix::zeros(1, d);
    let mut layer = HydraLinear::init(w0, b0, AdapterSpec::hydra(r), &mut rng).unwrap();
    let half = r / 2;
    layer
        .set_up_projections(Some(rng.gaussian_matrix(d, half, 0.1)), Some(rng.gaussian_matrix(d, half, 0.1)))
        .unwrap();
    layer
}

fn bench_hydra(c: &mut Criterion) {
    let layer = adapted_layer(64, 4);
    let x = Rng::new(4).gaussian_matrix(128, 64, 1.0);
    let folded = layer.fold();
    c.bench_function("hydra/forward_eval", |b| b.iter(|| layer.forward_eval(black_box(&x)).unwrap()));
    c.bench_function("hydra/folded_apply", |b| b.iter(|| folded.apply(black_box(&x)).unwrap()));
    c.bench_function("hydra/fold", |b| b.iter(|| black_box(&layer).fold()));
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(5);
    let mut model = MicroTransformer::build(&cfg, &mut rng).unwrap();
    model.set_mode(Mode::Inference);
    let tokens: Vec<Vec<usize>> = (0..32)
        .map(|_| (0..cfg.seq_len).map(|p| if p == 0 { 0 } else { 1 + rng.below(cfg.vocab - 1) }).collect())
        .collect();
    c.bench_function("model/logits_batch32", |b| b.iter(|| model.logits(black_box(&tokens)).unwrap()));
}

criterion_group!(benches, bench_matmul, bench_svd, bench_hydra, bench_model);
criterion_main!(benches);
