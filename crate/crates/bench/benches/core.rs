use criterion::{black_box, criterion_group, criterion_main, Criterion};
use egocog_bench::{sample_windows, small_model_config};
use egocog_core::episodes::savgol_smooth;
use egocog_core::geometry::{matrix_to_rot6d, rot6d_to_matrix, RotMatrix};
use egocog_core::model::{EgoCogNav, Forecaster, ModelConfig};
use egocog_core::training::{prepare_examples, train, TrainConfig};

fn geometry(c: &mut Criterion) {
    let m = RotMatrix::rz(0.3).mul(&RotMatrix::rx(-0.7));
    c.bench_function("rot6d_round_trip", |b| {
        b.iter(|| rot6d_to_matrix(&matrix_to_rot6d(black_box(&m)).unwrap()).unwrap())
    });
    let series: Vec<f64> = (0..600).map(|i| (i as f64 * 0.05).sin()).collect();
    c.bench_function("savgol_600", |b| b.iter(|| savgol_smooth(black_box(&series), 9, 3).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = EgoCogNav::new(cfg.clone()).unwrap();
    let w = sample_windows(&cfg, 1);
    let input = model.prepare(&w[0]).unwrap();
    c.bench_function("predict_default", |b| b.iter(|| model.predict(black_box(&input)).unwrap()));

    let small = small_model_config();
    let windows = sample_windows(&small, 8);
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_8_windows_small", |b| {
        b.iter(|| {
            let mut m = EgoCogNav::new(small.clone()).unwrap();
            let ex = prepare_examples(&m, &windows).unwrap();
            train(&mut m, &ex, &[], &tcfg, None).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, geometry, model);
criterion_main!(benches);
