use criterion::{black_box, criterion_group, criterion_main, Criterion};
use taftseg::episodes::{sample_episode, Phase};
use taftseg::eval::predict_episode;
use taftseg::train::episode_step;
use taftseg::SceneSource;
use taftseg_bench::fixture;

fn step(c: &mut Criterion) {
    let (w, model, ep) = fixture(12);
    let mut group = c.benchmark_group("episode");
    group.sample_size(10);
    group.bench_function("train_step_12_queries", |b| {
        b.iter(|| black_box(episode_step(&model, &ep, w.catalog()).unwrap()))
    });
    let test = sample_episode(&w, Phase::Test, 0, 1, 1, 2).unwrap();
    group.bench_function("predict_single_scale", |b| {
        b.iter(|| black_box(predict_episode(&model, &test, &[1.0]).unwrap()))
    });
    group.bench_function("predict_three_scales", |b| {
        b.iter(|| black_box(predict_episode(&model, &test, &[0.7, 1.0, 1.3]).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
