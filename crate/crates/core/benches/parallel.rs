//! Parallel against sequential execution of the hot loops.

use cimlab::bayesian::mc_forward;
use cimlab::crossbar::{map_weights, CrossbarConfig, FaultScenario};
use cimlab::data::Blobs;
use cimlab::nn::{build, Arch, ArchSpec, Bayes};
use cimlab::par;
use cimlab::testing::{fault_coverage, TestSuite};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_mc(c: &mut Criterion) {
    let data = Blobs::new(10, 16, 1.0, 5.0, 0).sample(256, 0);
    let spec = ArchSpec::new(Arch::MlpS, vec![16], 10).with_bayes(Bayes::Scale { p: 0.2, adaptive: None });
    let model = build(&spec, 0).unwrap();
    let mut group = c.benchmark_group("mc_forward_t32");
    for (name, seq) in modes() {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| mc_forward(&model, &data.x, 32, 1).unwrap()));
    }
    par::set_sequential(false);
    group.finish();
}

fn bench_coverage(c: &mut Criterion) {
    let data = Blobs::new(10, 16, 1.0, 5.0, 0).sample(64, 0);
    let model = build(&ArchSpec::new(Arch::MlpS, vec![16], 10), 0).unwrap();
    let clean = map_weights(&model, &CrossbarConfig::default()).unwrap();
    let gen = |p: &_, s| FaultScenario::stuck(0.05).realize(p, s);
    let mut group = c.benchmark_group("coverage_50_scenarios");
    group.sample_size(20);
    for (name, seq) in modes() {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fault_coverage(&model, &clean, gen, TestSuite::Inputs(&data.x), 50, 3).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_mc, bench_coverage);
criterion_main!(benches);
