use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ttt_core::{
    adapt_sample, corrupt, meta_update, rank_candidates, CorruptionKind, CorruptionSpec, ImageInput, ToyBackends,
    TttConfig,
};

fn smooth_image(h: usize, w: usize) -> ImageInput {
    ImageInput::from_fn("bench", h, w, |y, x, c| {
        let v = 128.0 + 80.0 * ((y as f64 / 17.0).sin() * (x as f64 / 23.0 + c as f64).cos());
        v as u8
    })
    .unwrap()
}

fn scoring(c: &mut Criterion) {
    let tb = ToyBackends::standard();
    let img = tb.world.render("toy-000").unwrap();
    let captions: Vec<String> = (0..16)
        .map(|i| format!("There is a dog. There is a cup. A {} sits nearby!", tb.world.objects()[i % 8]))
        .collect();
    c.bench_function("rank_16_candidates", |b| {
        b.iter(|| rank_candidates(black_box(&img), black_box(&captions), tb.backends().encoder).unwrap())
    });
}

fn adaptation(c: &mut Criterion) {
    let tb = ToyBackends::standard();
    let img = tb.world.render("toy-001").unwrap();
    let cfg = TttConfig { iterations: 20, ..TttConfig::toy() };
    let mut g = c.benchmark_group("adapt_sample");
    g.sample_size(10);
    g.bench_function("toy_20_iters", |b| b.iter(|| adapt_sample(&img, &cfg, tb.backends(), None).unwrap()));
    g.finish();

}

fn reptile(c: &mut Criterion) {
    let tb = ToyBackends::standard();
    let dims = tb.backends().generator.model_dims().clone();
    let cfg = TttConfig::toy();
    let phi = ttt_core::lora::init_adapter(&dims, &cfg.lora, 1).unwrap();
    let phi_k = ttt_core::lora::init_adapter(&dims, &cfg.lora, 2).unwrap();
    c.bench_function("meta_update", |b| b.iter(|| meta_update(black_box(&phi), black_box(&phi_k), 0.1).unwrap()));
}

fn corruptions(c: &mut Criterion) {
    let img = smooth_image(224, 224);
    let mut g = c.benchmark_group("corrupt_224_s3");
    g.sample_size(10);
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 3, 7).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(kind.name()), &spec, |b, s| {
            b.iter(|| corrupt(black_box(&img), s).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, adaptation, reptile, corruptions);
criterion_main!(benches);
