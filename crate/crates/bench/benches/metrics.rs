use criterion::{criterion_group, criterion_main, Criterion};
use eauc_core::calib_metrics::{auroc, error_retention_curve, f1_retention_curve, DEFAULT_GRID};

fn metrics(c: &mut Criterion) {
    let n = 10_000;
    let errors: Vec<f64> = (0..n).map(|i| 3.0 * ((i as f64 * 0.013).sin().abs())).collect();
    let unc: Vec<f64> = errors.iter().enumerate().map(|(i, e)| e + (i as f64 * 0.7).cos()).collect();
    let labels: Vec<bool> = errors.iter().map(|&e| e <= 1.6).collect();
    let scores: Vec<f64> = unc.iter().map(|u| -u).collect();

    c.bench_function("auroc_10k", |b| b.iter(|| auroc(&scores, &labels).unwrap()));
    c.bench_function("error_retention_10k", |b| {
        b.iter(|| error_retention_curve(&errors, &unc, DEFAULT_GRID).unwrap())
    });
    c.bench_function("f1_retention_10k", |b| {
        b.iter(|| f1_retention_curve(&errors, &unc, 1.6, DEFAULT_GRID).unwrap())
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
