//! Rayon data-parallel kernels against the sequential fallback, switched at
//! runtime in one binary. Build with `--no-default-features` to bench the
//! fallback alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stereofb::autodiff::{Graph, PaddingMode};
use stereofb::config::RunConfig;
use stereofb::data::Dataset;
use stereofb::network::Network;
use stereofb::parallel;
use stereofb::synthetic::scene_set;
use stereofb::train::batch_gradients;
use stereofb::Tensor;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::rand_uniform([4, 32, 64, 96], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform([32, 32, 3, 3], -0.1, 0.1, &mut rng);
    let mut group = c.benchmark_group("conv2d_4x32x64x96");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let g = Graph::new();
                let y = g
                    .conv2d(g.constant(x.clone()), g.constant(w.clone()), None, 1, 1, PaddingMode::Zero)
                    .unwrap();
                g.backward(g.sum(y)).unwrap();
            })
        });
    }
    group.finish();
    parallel::set_enabled(true);
}

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let data = Dataset::from_scenes(&scene_set(0, 4, cfg.train.patch_h, cfg.train.patch_w, 2, 8, 2).unwrap());
    let (net, store) = Network::init(&cfg.model, 0).unwrap();
    let batch: Vec<_> = data.samples.iter().collect();
    let mut group = c.benchmark_group("batch_gradients_desk_4");
    group.sample_size(10);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&net, &store, &batch, &cfg).unwrap())
        });
    }
    group.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
