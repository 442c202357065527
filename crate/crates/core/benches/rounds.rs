//! One federated round with clients trained one after another versus on the
//! rayon pool. Build with `--no-default-features` to see the fallback path
//! used for both.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedclip_core::config::{DataConfig, ExperimentConfig};
use fedclip_core::datastore::{ShiftMode, SynthSpec};
use fedclip_core::experiment::Experiment;
use fedclip_core::par::Parallelism;

fn experiment(clients: usize) -> Experiment {
    let mut cfg = ExperimentConfig {
        rounds: 1,
        ..ExperimentConfig::default()
    };
    cfg.data = DataConfig::Synthetic {
        synthetic: SynthSpec {
            clients,
            dim: 64,
            classes: 4,
            n_per_client: 400,
            shift: ShiftMode::Rotation,
            sigma: 0.15,
            seed: 0,
        },
    };
    Experiment::build(&cfg).expect("bench config")
}

fn rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for clients in [2, 8] {
        for (label, mode) in [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, clients), &mode, |b, &mode| {
                b.iter_batched(
                    || experiment(clients),
                    |mut e| e.server.run_round(&mut e.clients, mode, e.global_bank.as_ref()).unwrap(),
                    criterion::BatchSize::LargeInput,
                );
            });
        }
    }
    group.finish();
}

criterion_group!(benches, rounds);
criterion_main!(benches);
