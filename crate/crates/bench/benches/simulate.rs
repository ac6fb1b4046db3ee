use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use granary_core::sim::{generate_workload, run, GenParams, SimConfig, Template};
use granary_core::Mode;

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    let p = GenParams {
        jobs: 4,
        ..GenParams::default()
    };
    for t in [
        Template::BatchChain,
        Template::Streaming,
        Template::GraphIterative,
        Template::SkewedJoin,
    ] {
        let w = generate_workload(t, &p, 1);
        for mode in [Mode::DataDriven, Mode::ComputeCentric] {
            let cfg = SimConfig { mode, ..t.config() };
            g.bench_with_input(
                BenchmarkId::new(t.as_str(), mode.as_str()),
                &(&w, &cfg),
                |b, (w, cfg)| b.iter(|| run(w, cfg).unwrap().1.makespan_s),
            );
        }
    }
    g.finish();
}

criterion_group!(benches, simulate);
criterion_main!(benches);
