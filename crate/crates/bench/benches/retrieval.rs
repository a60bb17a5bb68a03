use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mocoll_bench::embedding_pool;
use mocoll_core::retrieval::{select_examples, FewShotConfig, FewShotStrategy};

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("few_shot");
    for n in [500, 5000] {
        let (cases, index) = embedding_pool(n, 64, 3);
        for strategy in [FewShotStrategy::Similarity, FewShotStrategy::Random] {
            let config = FewShotConfig { k: 5, strategy, seed: 1 };
            let id = BenchmarkId::new(format!("{strategy:?}").to_lowercase(), n);
            group.bench_with_input(id, &n, |b, _| {
                b.iter(|| select_examples(black_box(&cases[0]), &cases, &config, Some(&index)))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
