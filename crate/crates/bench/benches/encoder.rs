use criterion::{criterion_group, criterion_main, Criterion};
use persrep_bench::{masked_record, noise_image};
use persrep_core::encoder::{AdapterSpec, Encoder, ToyVit};
use persrep_core::training::{augment, augment_with, AugmentParams};

fn embed(c: &mut Criterion) {
    let base = ToyVit::new(0);
    let adapted = base.attach(&AdapterSpec::default(), 0).unwrap();
    let img = noise_image(64);
    c.bench_function("embed/base", |b| b.iter(|| base.embed(&img).unwrap()));
    c.bench_function("embed/adapted", |b| b.iter(|| adapted.embed(&img).unwrap()));
    let large = noise_image(256);
    c.bench_function("embed/resize_256", |b| b.iter(|| base.embed(&large).unwrap()));
}

fn augmentation(c: &mut Criterion) {
    let rec = masked_record(64);
    let p = AugmentParams::sample(3);
    c.bench_function("augment/64", |b| b.iter(|| augment_with(&rec, &p)));
    c.bench_function("augment/sampled", |b| b.iter(|| augment(&rec, 3)));
}

criterion_group!(benches, embed, augmentation);
criterion_main!(benches);
