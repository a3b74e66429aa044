use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mmfuse::config::RunConfig;
use mmfuse::data::synth_toy_dataset;
use mmfuse::unifier::fuse_tokens;
use mmfuse::Model;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unify(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("fuse_tokens");
    for &(tokens, dim) in &[(64usize, 32usize), (1024, 64), (4096, 256)] {
        let grids: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((tokens, dim), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let views: Vec<_> = grids.iter().map(|g| g.view()).collect();
        let maa = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let conf = [0.9, 0.4, 0.7];
        let weights = [1.0, 1.0, 0.0];
        group.bench_with_input(BenchmarkId::from_parameter(format!("{tokens}x{dim}")), &(), |b, _| {
            b.iter(|| fuse_tokens(black_box(&views), &conf, &weights, maa.view()).unwrap())
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model_config().unwrap(), 0).unwrap();
    let mut synth = cfg.synth.clone();
    synth.train_count = 4;
    synth.test_count = 1;
    let data = synth_toy_dataset(&synth).unwrap();
    let sample = model.prepare(&data.train.samples[0]).unwrap();
    c.bench_function("encode_toy", |b| b.iter(|| model.encode(black_box(&sample)).unwrap()));
    c.bench_function("loss_and_grads_toy", |b| {
        b.iter(|| model.loss_and_grads(black_box(&sample)).unwrap())
    });
}

criterion_group!(benches, unify, encode);
criterion_main!(benches);
