//! Benchmarks for the hot paths: the E-step, a whole fit, the penalized
//! coordinate-descent update and the sampler.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tpmix::{
    e_step, fit, penalized_m_step_positive, prepare, sample_al, simulate, FitOptions,
    MixtureParams, Observation, PanelDataset, PreparedData, QuantileConfig, UnitRecord,
};

fn template(n_units: usize, n_times: usize) -> PanelDataset {
    let mut units = Vec::with_capacity(n_units);
    for i in 0..n_units {
        let group = if i % 2 == 0 { 1.0 } else { 0.0 };
        let observations = (0..n_times)
            .map(|t| Observation {
                time: t as i64 + 1,
                y: 0.0,
                s: vec![group, t as f64],
                x: vec![group, (0.9 * i as f64 + 0.7 * t as f64).sin()],
            })
            .collect();
        units.push(UnitRecord {
            unit_id: format!("u{i:04}"),
            observations,
        });
    }
    PanelDataset {
        units,
        binary_names: vec!["group".into(), "visit".into()],
        positive_names: vec!["group".into(), "wave".into()],
    }
}

fn truth() -> MixtureParams {
    MixtureParams::new(
        vec![0.5, -0.5],
        vec![1.0, -0.8],
        0.4,
        vec![-1.0, 0.5],
        vec![-1.0, 1.5],
        vec![0.45, 0.55],
    )
    .unwrap()
}

fn prepared(n_units: usize, n_times: usize) -> PreparedData {
    let cfg = QuantileConfig::new(0.5).unwrap();
    let panel = simulate(&truth(), &template(n_units, n_times), &cfg, 11).unwrap();
    prepare(&panel).unwrap()
}

fn bench_e_step(c: &mut Criterion) {
    let cfg = QuantileConfig::new(0.5).unwrap();
    let prep = prepared(200, 4);
    let params = truth();
    c.bench_function("e_step_200x4_g2", |b| {
        b.iter(|| e_step(black_box(&params), black_box(&prep), &cfg).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let cfg = QuantileConfig::new(0.5).unwrap();
    let prep = prepared(50, 4);
    let opts = FitOptions {
        n_starts: 1,
        max_iter: 50_000,
        ..FitOptions::default()
    };
    c.bench_function("fit_50x4_g2", |b| {
        b.iter(|| fit(black_box(&prep), &cfg, 2, &opts).unwrap())
    });
}

fn bench_coordinate_descent(c: &mut Criterion) {
    let cfg = QuantileConfig::new(0.5).unwrap();
    let prep = prepared(200, 4);
    let params = truth();
    let state = e_step(&params, &prep, &cfg).unwrap();
    c.bench_function("penalized_m_step_200x4_g2", |b| {
        b.iter(|| {
            penalized_m_step_positive(
                black_box(&state),
                black_box(&prep),
                &cfg,
                &params,
                0.5,
            )
            .unwrap()
        })
    });
}

fn bench_sample_al(c: &mut Criterion) {
    c.bench_function("sample_al_1000", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        b.iter(|| {
            let mut acc = 0.0;
            for _ in 0..1000 {
                acc += sample_al(0.7, 1.3, 0.25, &mut rng).unwrap();
            }
            acc
        })
    });
}

criterion_group!(
    benches,
    bench_e_step,
    bench_fit,
    bench_coordinate_descent,
    bench_sample_al
);
criterion_main!(benches);
