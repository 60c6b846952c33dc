//! Rayon pool of every core against a single-thread pool, on the three hot
//! paths: batched convolution with its backward pass, batched SSIM loss,
//! and diffusion pair simulation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dima_core::data::{build_pairs, ImageSlice};
use dima_core::diffusion::{make_schedule, DiffusionSimulator, ScheduleKind, SimulationParams};
use dima_core::graph::Padding;
use dima_core::metrics::{ssim_loss_nodes, MetricConfig};
use dima_core::models::{TrainedUNetPredictor, UNet, UNetConfig};
use dima_core::{Bindings, Graph, RngStream};
use ndarray::Array2;

fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let all = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|n| {
            (
                n,
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .unwrap(),
            )
        })
        .collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let mut g = Graph::new();
    let x = g.input("x");
    let k = g.param("k");
    let y = g.conv2d(x, k, None, Padding::Same);
    let root = g.mean(y);
    let xv = rng.gaussian(&[8, 16, 64, 64]);
    let kv = rng.gaussian(&[16, 16, 3, 3]);
    let mut b = Bindings::new();
    b.bind(x, &xv).bind(k, &kv);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (n, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| pool.install(|| g.gradient(root, &b).unwrap()))
        });
    }
    group.finish();
}

fn ssim_batch(c: &mut Criterion) {
    let mut rng = RngStream::new(2, 0);
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.input("y");
    let loss = ssim_loss_nodes(&mut g, x, y, &MetricConfig::default());
    let xv = rng.gaussian(&[16, 1, 64, 64]);
    let yv = rng.gaussian(&[16, 1, 64, 64]);
    let mut b = Bindings::new();
    b.bind(x, &xv).bind(y, &yv);
    let mut group = c.benchmark_group("ssim_loss_batch16");
    for (n, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| pool.install(|| g.evaluate(loss, &b).unwrap()))
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let sched = make_schedule(50, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let cfg = UNetConfig {
        levels: 2,
        base_channels: 8,
        time_conditioned: true,
        time_embedding_dim: 16,
        ..Default::default()
    };
    let net = UNet::new(cfg, &mut RngStream::new(3, 0)).unwrap();
    let pred = TrainedUNetPredictor::new(net, sched.clone()).unwrap();
    let presets = vec![
        ("a".to_string(), SimulationParams::new(4, 1)),
        ("b".to_string(), SimulationParams::new(2, 2)),
    ];
    let sim = DiffusionSimulator::new(pred, sched, presets).unwrap();
    let mut rng = RngStream::new(4, 0);
    let clean: Vec<ImageSlice> = (0..8)
        .map(|_| ImageSlice::standalone(Array2::from_shape_fn((64, 64), |_| rng.uniform() as f32)))
        .collect();
    let base = RngStream::new(5, 0);
    let mut group = c.benchmark_group("simulate_8_slices");
    group.sample_size(10);
    for (n, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| pool.install(|| build_pairs(&clean, &sim, 2, &base).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, ssim_batch, simulation);
criterion_main!(benches);
