use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sae_align::scoring::{neuron_g, neuron_g_parallel};
use sae_align_bench::summaries;

fn scoring(c: &mut Criterion) {
    let d_hidden = 16_384;
    let (s, d) = summaries(2_000, d_hidden, 200, 3);
    let mut group = c.benchmark_group("neuron_g_2000x16k");
    group.sample_size(20);
    group.bench_function("sequential", |b| b.iter(|| black_box(neuron_g(&s, &d, d_hidden).unwrap())));
    group.bench_function("parallel_chunks_256", |b| {
        b.iter(|| black_box(neuron_g_parallel(&s, &d, d_hidden, 256).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
