//! Benchmarks for the data-parallel kernels.
//!
//! Group names carry the active execution mode, so running
//! `cargo bench` (parallel, the default) and
//! `cargo bench --no-default-features` (sequential) produces directly
//! comparable reports. Results are bit-identical across the two modes;
//! only the wall time changes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array1;
use paramflow::discrepancy::{witness_solve, RegularizationParams};
use paramflow::flow::{run_flow, FlowConfig, StepSchedule};
use paramflow::generator::{Generator, LatentSampler};
use paramflow::operators;
use paramflow::rkhs::{build_feature_map, RkhsFunction};
use paramflow::targets::eight_gaussians;
use paramflow::trainer::{train, GanConfig};

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_feature_map(c: &mut Criterion) {
    let map = build_feature_map(2, &[512, 512, 512], 512, 7).unwrap();
    let t = eight_gaussians(2.0, 0.04, 5).unwrap();
    let batch = t.sampler().sample(512).unwrap();
    let mut group = c.benchmark_group(format!("feature_map/{}", mode()));
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter("phi_batch_512"), |b| {
        b.iter(|| map.phi_batch(&batch.view()).unwrap())
    });
    group.bench_function(BenchmarkId::from_parameter("phi_jacobian_batch_512"), |b| {
        b.iter(|| map.phi_with_jacobian_batch(&batch.view()).unwrap())
    });
    group.finish();
}

fn bench_operator_assembly(c: &mut Criterion) {
    let map = build_feature_map(2, &[128, 128], 128, 7).unwrap();
    let gen = Generator::mlp(32, &[64], 2).unwrap();
    let theta = gen.init_theta(11);
    let mut s = LatentSampler::new(32, 13).unwrap();
    let latents = s.sample(256).unwrap();
    let mut group = c.benchmark_group(format!("operator/{}", mode()));
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter("assemble_256x128"), |b| {
        b.iter(|| operators::assemble(&map, &gen, &theta.view(), &latents.view()).unwrap())
    });
    let a = operators::assemble(&map, &gen, &theta.view(), &latents.view()).unwrap();
    group.bench_function(BenchmarkId::from_parameter("dense_d_128"), |b| {
        b.iter(|| a.dense_d())
    });
    let mu = RkhsFunction::new(Array1::from_shape_fn(128, |k| (k as f64 * 0.1).sin()));
    let params = RegularizationParams::new(10.0, 0.5).unwrap();
    group.bench_function(BenchmarkId::from_parameter("witness_solve_128"), |b| {
        b.iter(|| witness_solve(&a, &mu, &params).unwrap())
    });
    group.finish();
}

fn bench_flow_and_train(c: &mut Criterion) {
    let map = build_feature_map(2, &[64, 64], 64, 7).unwrap();
    let gen = Generator::mlp(16, &[32], 2).unwrap();
    let theta = gen.init_theta(11);
    let target = eight_gaussians(2.0, 0.04, 5).unwrap();
    let target_batch = target.sampler().sample(128).unwrap();
    let mut group = c.benchmark_group(format!("loops/{}", mode()));
    group.sample_size(10);
    let flow_cfg = FlowConfig {
        alpha: 10.0,
        beta: 0.5,
        step: StepSchedule::Constant { c: 1e-3 },
        iterations: 5,
        latent_batch: 128,
        spectral_diagnostics: true,
        seed: 3,
        ..FlowConfig::default()
    };
    group.bench_function(BenchmarkId::from_parameter("flow_5_steps"), |b| {
        b.iter(|| run_flow(&map, &gen, &theta.view(), &target_batch.view(), &flow_cfg).unwrap())
    });
    let gan_cfg = GanConfig {
        alpha: 10.0,
        n_critic: 5,
        batch: 128,
        iterations: 5,
        lr_critic: 1e-4,
        lr_generator: 1e-4,
        seed: 3,
        target_pool: 1024,
        ..GanConfig::default()
    };
    group.bench_function(BenchmarkId::from_parameter("train_5_iterations"), |b| {
        b.iter(|| train(&map, &gen, &theta.view(), &target, &gan_cfg).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_feature_map,
    bench_operator_assembly,
    bench_flow_and_train
);
criterion_main!(benches);
