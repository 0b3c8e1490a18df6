use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use gnn_readouts::graph::synthetic::{generate_localized_task, SyntheticConfig};
use gnn_readouts::graph::{split_dataset, Dataset, DEFAULT_FRACTIONS};
use gnn_readouts::message_passing::ConvKind;
use gnn_readouts::model::ModelSpec;
use gnn_readouts::parallel::map_sequential;
use gnn_readouts::readouts::ReadoutKind;
use gnn_readouts::training::{train_run, RunOptions, TrainConfig};

fn cell(ds: &Dataset, seed: u64) -> f64 {
    let split = split_dataset(ds.len(), seed, DEFAULT_FRACTIONS).unwrap();
    let spec = ModelSpec::new(ConvKind::Gcn, ReadoutKind::Mlp);
    let cfg = TrainConfig {
        epochs: 3,
        seed,
        ..TrainConfig::default()
    };
    let r = train_run(&spec, ds, &split, &cfg, &RunOptions::default()).unwrap();
    r.record.val_loss[r.record.best_epoch - 1]
}

fn bench_sweep(c: &mut Criterion) {
    let ds = generate_localized_task(&SyntheticConfig::new(120, 10, 20, 8, 0)).unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let mut group = c.benchmark_group("sweep_4_cells");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(map_sequential(&seeds, |&s| cell(&ds, s))))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("rayon", |b| {
        b.iter(|| {
            black_box(gnn_readouts::parallel::map_parallel(&seeds, |&s| {
                cell(&ds, s)
            }))
        })
    });
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
