use std::hint::black_box;

use catcnn::data::{make_dataset, SynthConfig};
use catcnn::groundtruth::compute_bins_or_single;
use catcnn::training::{make_sample, TrainConfig, Trainer};
use catcnn::CatCnn;
use criterion::{criterion_group, criterion_main, Criterion};

fn step(c: &mut Criterion) {
    let (scenes, _) = make_dataset(&SynthConfig::default(), 2).unwrap();
    let counts: Vec<usize> = scenes.iter().map(|s| s.count()).collect();
    let config = TrainConfig::default();
    let bins = compute_bins_or_single(&counts, config.arch.groups).unwrap();
    let area = (scenes[0].height() * scenes[0].width()) as f64;
    let sample = make_sample(&scenes[0], config.arch.divisor(), &bins, area).unwrap();

    let net = CatCnn::new(config.arch.clone(), 0).unwrap();
    c.bench_function("predict_64x64", |b| b.iter(|| black_box(net.predict(&sample.image).unwrap().count())));

    let mut trainer = Trainer::new(config, &counts).unwrap();
    c.bench_function("train_step_64x64", |b| b.iter(|| black_box(trainer.step(&sample).unwrap().l_whole)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = step
}
criterion_main!(benches);
