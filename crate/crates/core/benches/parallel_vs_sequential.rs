//! Rayon-backed `par::map` against a plain sequential map over the same
//! per-image work. Build with `--no-default-features` to see the fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgdet::corruptions::{apply_corruption, CorruptionSpec};
use dgdet::datasets::synth::{synth_samples, SynthConfig, SynthDomain};
use dgdet::detector::{build_detector, DetectorConfig, PairInput, StepOptions};
use dgdet::rng::{stream_rng, Stream};

fn corruption(c: &mut Criterion) {
    let samples = synth_samples(SynthDomain::SourcePlain, 16, 0, &SynthConfig::default()).unwrap();
    let spec = CorruptionSpec::new("glass_blur", 3);
    let work = |i: usize| apply_corruption(&samples[i].image, &spec, i as u64).unwrap();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut g = c.benchmark_group("corrupt_16");
    g.bench_function(BenchmarkId::new("parallel", dgdet::par::is_parallel()), |b| {
        b.iter(|| dgdet::par::map(&idx, |&i| work(i)))
    });
    g.bench_function("sequential", |b| b.iter(|| idx.iter().map(|&i| work(i)).collect::<Vec<_>>()));
    g.finish();
}

fn pair_steps(c: &mut Criterion) {
    let samples = synth_samples(SynthDomain::SourcePlain, 4, 0, &SynthConfig::default()).unwrap();
    let cfg = DetectorConfig { channels: 16, hidden: 32, ..DetectorConfig::default() };
    let det = build_detector(&cfg, 0).unwrap();
    let opts = StepOptions::default();
    let work = |i: usize| {
        let s = &samples[i];
        let input = PairInput { original: &s.image, augmented: &s.image, labels: &s.labels };
        det.pair_step(input, &opts, &mut stream_rng(0, Stream::Sampling, &[i as u64])).unwrap()
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut g = c.benchmark_group("pair_step_batch_4");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", dgdet::par::is_parallel()), |b| {
        b.iter(|| dgdet::par::map(&idx, |&i| work(i)))
    });
    g.bench_function("sequential", |b| b.iter(|| idx.iter().map(|&i| work(i)).collect::<Vec<_>>()));
    g.finish();
}

criterion_group!(benches, corruption, pair_steps);
criterion_main!(benches);
