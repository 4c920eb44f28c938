use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use sae_align::{apply_clamp, apply_swap, contamination, ActivationSpec, PolicyKind, SteeringPolicy};
use sae_align_bench::{gammas, scores};

const D_HIDDEN: usize = 16_384;
const TOKENS: usize = 256;

fn steering(c: &mut Criterion) {
    let g = gammas(TOKENS, D_HIDDEN, 1);
    let table = scores(D_HIDDEN, 2);
    let spec = ActivationSpec::top_k(32);
    let clamp = SteeringPolicy::new(PolicyKind::Clamp);

    let mut group = c.benchmark_group("steering_16k");
    group.throughput(Throughput::Elements(TOKENS as u64));
    group.bench_function("activate", |b| {
        b.iter(|| {
            for row in g.rows() {
                black_box(sae_align::activate(row, &spec));
            }
        })
    });
    group.bench_function("swap_plus_contamination", |b| {
        b.iter(|| {
            for row in g.rows() {
                let act = apply_swap(row, &table, &spec).unwrap();
                black_box(contamination(&act, &table));
            }
        })
    });
    group.bench_function("clamp_plus_contamination", |b| {
        b.iter(|| {
            for row in g.rows() {
                let act = apply_clamp(row, &table, &spec, &clamp).unwrap();
                black_box(contamination(&act, &table));
            }
        })
    });
    group.finish();
}

criterion_group!(benches, steering);
criterion_main!(benches);
