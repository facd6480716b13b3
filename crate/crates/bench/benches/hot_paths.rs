use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mtrnet::datagen::{generate_sample, sample_rng, RenderSpec};
use mtrnet::model::{DiscriminatorSpec, GeneratorSpec};
use mtrnet::pipeline::PreparedSample;
use mtrnet::training::{batch_for_step, Trainer, TrainingConfig};
use mtrnet::{Generator, Tensor};

fn rasterize(c: &mut Criterion) {
    let spec = RenderSpec { words_per_image: (8, 8), ..RenderSpec::default() };
    let sample = generate_sample(&spec, &mut sample_rng(1, 0), "0").unwrap();
    c.bench_function("rasterize 8 regions", |b| b.iter(|| black_box(&sample.regions).rasterize()));
    c.bench_function("render sample", |b| {
        b.iter(|| generate_sample(&spec, &mut sample_rng(1, 0), "0").unwrap())
    });
}

fn generator_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator forward 256");
    group.sample_size(10);
    for width in [0.125, 0.25] {
        let g = Generator::<f32>::new(GeneratorSpec::with_width(width), 0).unwrap();
        let x = Tensor::zeros([1, 4, 256, 256]);
        group.bench_function(format!("width {width}"), |b| b.iter(|| g.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let spec = RenderSpec { canvas_width: 64, canvas_height: 48, ..RenderSpec::default() };
    let corpus: Vec<_> = (0..4)
        .map(|i| {
            let s = generate_sample(&spec, &mut sample_rng(2, i), format!("{i}")).unwrap();
            PreparedSample::new(&s, None, 32).unwrap()
        })
        .collect();
    let cfg = TrainingConfig { batch_size: 4, width_multiplier: 0.125, ..TrainingConfig::default() };
    let mut t = Trainer::<f32>::with_specs(cfg, GeneratorSpec::test_scale(), DiscriminatorSpec::test_scale()).unwrap();
    let batch = batch_for_step(&corpus, &t.config, 0);
    c.bench_function("train step test scale", |b| b.iter(|| t.train_step(&batch).unwrap()));
}

criterion_group!(benches, rasterize, generator_forward, train_step);
criterion_main!(benches);
