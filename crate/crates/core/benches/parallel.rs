//! Sequential against rayon-parallel execution on the two hot loops: labelled
//! dataset generation and prompt-fed oracle features.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hmm_recovery::downstream::{gen_dataset, make_task, Source, Splits, VanillaTarget};
use hmm_recovery::model::random_hmm;
use hmm_recovery::par::Exec;
use hmm_recovery::tuning::{prompt_data, prompt_features};
use nalgebra::DVector;
use std::hint::black_box;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let p = random_hmm(1, 15, 10).unwrap();
    let task = make_task(1, 15, 6).unwrap();
    let splits = Splits { n_train: 1000, n_val: 100, n_test: 100, t_len: 129 };
    let source = Source::Vanilla { params: &p, target: VanillaTarget::MaskedFirst };

    let mut g = c.benchmark_group("gen_dataset");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| gen_dataset(source, &task, splits, 7, exec).unwrap()));
    }
    g.finish();

    let ds = gen_dataset(source, &task, splits, 7, Exec::Sequential).unwrap();
    let data = prompt_data(Exec::Sequential, &p, &ds.train).unwrap();
    let prompts = vec![DVector::from_element(10, 0.5); 20];
    let mut g = c.benchmark_group("prompt_features");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| prompt_features(exec, black_box(&data), &prompts)));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
