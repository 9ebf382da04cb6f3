use criterion::{criterion_group, criterion_main, Criterion};
use eauc_core::autodiff::Tape;
use eauc_core::datasets::{generate_scenes, SynthConfig};
use eauc_core::traj_model::{sample_plans_batch, teacher_forced_nodes, TrajModelConfig, TrajModelParams};

fn model(c: &mut Criterion) {
    let synth = SynthConfig {
        scenes: 32,
        shifted_scenes: 0,
        ..SynthConfig::default()
    };
    let scenes = generate_scenes(&synth).unwrap();
    let config = TrajModelConfig {
        context_dim: scenes[0].context.len(),
        horizon: scenes[0].target.horizon(),
        timestep: scenes[0].target.timestep(),
        hidden: 64,
        ..TrajModelConfig::default()
    };
    let params = TrajModelParams::init(config, 0).unwrap();
    let contexts: Vec<&[f64]> = scenes.iter().map(|s| s.context.as_slice()).collect();
    let targets: Vec<_> = scenes.iter().map(|s| &s.target).collect();

    c.bench_function("teacher_forced_step_b32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let tf = teacher_forced_nodes(&mut tape, &bound, &contexts, &targets).unwrap();
            let root = tape.sum(tf.loglik);
            tape.backward(root).unwrap()
        })
    });

    let seeds: Vec<u64> = (0..16).collect();
    c.bench_function("sample_plans_16x10", |b| {
        b.iter(|| sample_plans_batch(&params, &contexts[..16], 10, &seeds).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = model
}
criterion_main!(benches);
