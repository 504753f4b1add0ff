//! Replica fan-out: sequential loop against the rayon pool, on the workload
//! every ensemble statistic is built from (independent trajectories).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tsns_core::dynamics::{evolve, WienerStore};
use tsns_core::ergodic::ensemble_seed;
use tsns_core::exec::{init_thread_pool, map_indexed, Execution};
use tsns_core::regime::reference;
use tsns_core::spectral::SpectralField;

fn ensemble(c: &mut Criterion) {
    init_thread_pool();
    let cfg = reference::mixing();
    let steps = cfg.steps_per_period().unwrap() as usize;
    let w0 = SpectralField::zeros(cfg.trunc);
    let mut group = c.benchmark_group("ensemble_one_period");
    group.sample_size(10);
    for replicas in [16usize, 64] {
        for (name, mode) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, replicas), &replicas, |b, &n| {
                b.iter(|| {
                    map_indexed(n, mode, |r| {
                        let store = WienerStore::derive(
                            ensemble_seed(0, 0, r as u64),
                            cfg.dt,
                            cfg.noise.channels(),
                            0,
                            steps as i64,
                        )
                        .unwrap();
                        evolve(&w0, 0, steps, &cfg, Some(&store)).unwrap().norm_sq()
                    })
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
