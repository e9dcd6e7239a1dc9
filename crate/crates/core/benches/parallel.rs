//! Parallel vs sequential fan-out over the data-parallel workloads.
//! Run with `HFGD_THREADS=<n> cargo bench`; with the variable unset or 1
//! the parallel path degenerates to the sequential one.

use criterion::{criterion_group, criterion_main, Criterion};
use hfgd::data::{generate_sample, Dataset, SceneSpec};
use hfgd::model::{Hfgd, ModelConfig};
use hfgd::par;
use hfgd::train::{predict, Head};

fn bench_generation(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let mut g = c.benchmark_group("generate_64_samples");
    g.bench_function("parallel", |b| b.iter(|| par::map(64, |i| generate_sample(i as u64, &spec))));
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(64, |i| generate_sample(i as u64, &spec)))
    });
    g.finish();
}

fn bench_inference(c: &mut Criterion) {
    let data = Dataset::generate(32, 0, &SceneSpec::default());
    let (model, store) = Hfgd::new(&ModelConfig::default(), 0).unwrap();
    let images: Vec<_> = data.samples.iter().map(|s| s.image_tensor()).collect();
    let run = |i: usize| predict(&model, &store, &images[i], Head::Student).unwrap();
    let mut g = c.benchmark_group("predict_32_images");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| par::map(images.len(), run)));
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(images.len(), run)));
    g.finish();
}

criterion_group!(benches, bench_generation, bench_inference);
criterion_main!(benches);
