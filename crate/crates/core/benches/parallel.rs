//! Data-parallel versus sequential execution.
//!
//! Whole-operation benches are labelled with the build mode, so running
//!
//! ```text
//! cargo bench -p viewforge --bench parallel
//! cargo bench -p viewforge --bench parallel --no-default-features
//! ```
//!
//! puts both variants side by side under `target/criterion`. The
//! `row_kernel` group compares both paths within a single build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viewforge::camera::{ray_for_pixel, spherical_to_extrinsics, PinholeIntrinsics, SphericalPose};
use viewforge::denoiser::Denoiser;
use viewforge::diffusion::{train_step, NoiseSchedule, TrainConfig};
use viewforge::meshing::{mean_filter, DensityVolume};
use viewforge::metrics::chamfer;
use viewforge::parallel::{map_indexed, map_indexed_seq};
use viewforge::scene::{build_dataset, generate_object, render_pose, trace, DirectionalLight};
use viewforge::voxelfield::{render_pose as render_grid, RenderSettings, VoxelGrid};

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn whole_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obj = generate_object(3);
    let light = DirectionalLight::random(&mut rng);
    let pose = SphericalPose::new(1.1, 0.7, 1.9).unwrap();

    let mut g = c.benchmark_group("ops");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("scene_render_64", MODE), |b| {
        b.iter(|| render_pose(black_box(&obj), &pose, 64, &light))
    });

    let mut grid = VoxelGrid::new(64, -3.0, 0.0).unwrap();
    for (i, v) in grid.density_raw.iter_mut().enumerate() {
        *v = ((i % 97) as f32 / 97.0) * 4.0 - 2.0;
    }
    let settings = RenderSettings::default();
    g.bench_function(BenchmarkId::new("voxel_render_64", MODE), |b| {
        b.iter(|| render_grid(black_box(&grid), &pose, &settings))
    });

    let vol = DensityVolume::from_fn(64, |p| p[0] * p[1] + p[2]);
    g.bench_function(BenchmarkId::new("mean_filter_64", MODE), |b| {
        b.iter(|| mean_filter(black_box(&vol), [7; 3]).unwrap())
    });

    let cloud = |seed: u64| {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..2000)
            .map(|_| [0, 1, 2].map(|_| r.random_range(-0.5..0.5)))
            .collect::<Vec<[f64; 3]>>()
    };
    let (pa, pb) = (cloud(1), cloud(2));
    g.bench_function(BenchmarkId::new("chamfer_2000", MODE), |b| {
        b.iter(|| chamfer(black_box(&pa), black_box(&pb)).unwrap())
    });

    let ds = build_dataset(2, 4, 32, &mut rng).unwrap();
    let cfg = TrainConfig {
        widths: [16, 32, 64],
        ..Default::default()
    };
    let sched = NoiseSchedule::linear(cfg.diffusion_steps).unwrap();
    let mut model = Denoiser::new(cfg.denoiser_config()).unwrap();
    let mut opt = cfg.optimizer();
    g.bench_function(BenchmarkId::new("train_step_batch8", MODE), |b| {
        b.iter(|| {
            train_step(
                &mut model,
                &ds,
                8,
                &sched,
                &mut opt,
                cfg.cond_drop_prob,
                &mut rng,
            )
            .unwrap()
        })
    });
    g.finish();
}

fn row_kernel(c: &mut Criterion) {
    let obj = generate_object(5);
    let light = DirectionalLight::random(&mut ChaCha8Rng::seed_from_u64(1));
    let extr = spherical_to_extrinsics(&SphericalPose::new(1.0, 0.2, 2.0).unwrap());
    let intr = PinholeIntrinsics::square(64);
    let row = |y: usize| {
        (0..64)
            .map(|x| {
                let (o, d) = ray_for_pixel(&extr, &intr, (x, y), (0.5, 0.5));
                trace(&obj, &o, &d, &light).map_or(1.0, |c| c[0])
            })
            .sum::<f64>()
    };
    let mut g = c.benchmark_group("row_kernel");
    g.sample_size(20);
    g.bench_function("map_indexed", |b| b.iter(|| map_indexed(64, row)));
    g.bench_function("map_indexed_seq", |b| b.iter(|| map_indexed_seq(64, row)));
    g.finish();
}

criterion_group!(benches, whole_ops, row_kernel);
criterion_main!(benches);
