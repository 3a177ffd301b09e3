use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use featgen_bench::{default_policy, product_dataset};
use featgen_core::evaluators::forest::{ForestConfig, RandomForest, Target};
use featgen_core::nn::Ctx;
use featgen_core::pretrain::score_function_gradient;
use featgen_core::transform::{apply_program, parse_program};
use featgen_core::{seed, FeatureProgram, Split};

fn sampling(c: &mut Criterion) {
    let ds = product_dataset(500, 5, 1);
    let policy = default_policy(&ds, 1);
    let input = policy.encoder_input(&ds).unwrap();
    let mut rng = seed::rng(1, "bench.sample");
    c.bench_function("sample sequence (d_model 128, 5 features)", |b| {
        b.iter(|| policy.sample(&input, 1.0, &mut rng).unwrap())
    });
}

fn gradients(c: &mut Criterion) {
    let ds = product_dataset(500, 5, 2);
    let policy = default_policy(&ds, 2);
    let input = policy.encoder_input(&ds).unwrap();
    let mut rng = seed::rng(2, "bench.grad");
    c.bench_function("score-function gradient of one sequence", |b| {
        b.iter_batched(
            || {
                let s = policy.sample(&input, 1.0, &mut rng).unwrap();
                let w = vec![0.1; s.token_ids.len()];
                (s, w)
            },
            |(s, w)| score_function_gradient(&policy, &input, &s, &w, &mut Ctx::eval()).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn forest(c: &mut Criterion) {
    let ds = product_dataset(1000, 5, 3);
    let columns: Vec<Vec<f64>> = ds.columns.iter().map(|c| c.values.clone()).collect();
    let labels: Vec<usize> = ds.labels.iter().map(|&y| y as usize).collect();
    let rows = ds.rows_in(Split::Train);
    let config = ForestConfig::default();
    c.bench_function("random forest fit (100 trees, 600 rows)", |b| {
        b.iter(|| RandomForest::fit(&columns, Target::Classes(&labels, 2), &rows, &config, 3))
    });
}

fn transform(c: &mut Criterion) {
    let ds = product_dataset(1000, 5, 4);
    let program = FeatureProgram::from_tokens(&parse_program("+V1 *V2\n-V3 square log\n+V4 /V5 +V1").unwrap());
    c.bench_function("apply three-feature program (1000 rows)", |b| {
        b.iter(|| apply_program(&program, &ds, 10))
    });
}

criterion_group!(benches, sampling, gradients, forest, transform);
criterion_main!(benches);
