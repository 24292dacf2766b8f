// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use langfir::activations::collect_activations;
use langfir::exec::Execution;
use langfir::experiment::{Method, MethodParams, Pipeline, SplitKind, TaskConfig};
use langfir::features::IdentificationConfig;
use langfir::intervention::generate_batch;
use langfir::world::{PlantedBackend, PlantedWorld, WorldConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let world = Arc::new(PlantedWorld::new(WorldConfig::default()).unwrap());
    let backend = PlantedBackend::new(world.clone());
    let sae = world.oracle_sae();
    let sentences: Vec<_> = (0..200).map(|s| world.sample_sentence(s % 5, 20, s as u64).unwrap()).collect();
    let acts = collect_activations(&backend, &sentences, 8, Execution::Sequential).unwrap();
    let p = Pipeline::new(world, TaskConfig::default(), IdentificationConfig::default(), Execution::Sequential).unwrap();
    let spec = p.build(Method::Langfir, &MethodParams::default(), "es").unwrap();
    let (prompts, refs) = p.prompts(SplitKind::Test, "es").unwrap();
    let steps: Vec<usize> = refs.iter().map(|r| r.len()).collect();

    let mut g = c.benchmark_group("collect_activations");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| collect_activations(&backend, black_box(&sentences), 8, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("encode_rows");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sae.encode_rows(black_box(acts.data()), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("generate_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_batch(p.backend(), black_box(&prompts), &steps, &spec, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
