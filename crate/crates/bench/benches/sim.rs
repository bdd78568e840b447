use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lanesim_bench::prepared;
use lanesim_core::{
    oracle_simulate_chain, run_kernel, ChainSpec, KernelName, Stage, StageKind, Toggles,
};

fn bench_kernels(c: &mut Criterion) {
    let cases = [
        ("scal_1024_baseline", KernelName::Scal, &[1024u64][..], Toggles::all_off()),
        ("scal_1024_opt", KernelName::Scal, &[1024], Toggles::all_on()),
        ("axpy_1024_opt", KernelName::Axpy, &[1024], Toggles::all_on()),
        ("gemv_32x128_opt", KernelName::Gemv, &[32, 128], Toggles::all_on()),
    ];
    let mut group = c.benchmark_group("simulate");
    for (label, name, size, toggles) in cases {
        let (kernel, cfg) = prepared(name, size, toggles);
        group.bench_function(label, |b| {
            b.iter(|| run_kernel(black_box(&kernel), black_box(&cfg)).unwrap().counters.cycles)
        });
    }
    group.finish();
}

fn bench_chain_oracle(c: &mut Criterion) {
    let stages = vec![
        Stage { kind: StageKind::Load, startup: 0 },
        Stage { kind: StageKind::Multiply, startup: 4 },
        Stage { kind: StageKind::Add, startup: 4 },
        Stage { kind: StageKind::Store, startup: 1 },
    ];
    let spec = ChainSpec::from_stages(stages, 12, 3, 4096, 8).unwrap();
    c.bench_function("chain_oracle_4096", |b| {
        b.iter(|| oracle_simulate_chain(black_box(&spec)).unwrap())
    });
}

criterion_group!(benches, bench_kernels, bench_chain_oracle);
criterion_main!(benches);
