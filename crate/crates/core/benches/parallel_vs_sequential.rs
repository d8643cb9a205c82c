use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qkdpass_core::bits::BitString;
use qkdpass_core::distill::ldpc::{CodeBook, CodeDescriptor};
use qkdpass_core::exec::Execution;
use qkdpass_core::link::{simulate_pass, Downlink, LinkBudgetParams, PassProfile};
use qkdpass_core::source::SourceParams;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn pass_simulation(c: &mut Criterion) {
    let profile = PassProfile { duration: 30.0, max_elevation: 60.0, ..Default::default() };
    let downlink = Downlink::from_profile(&profile, &LinkBudgetParams::default(), &SourceParams::default()).unwrap();
    let mut group = c.benchmark_group("simulate_pass_30s");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_pass(&downlink, 1, exec).unwrap().events.len())
        });
    }
    group.finish();
}

fn batch_decode(c: &mut Criterion) {
    let code = CodeBook::new().get(CodeDescriptor { rung: 1, block_len: 20_000 });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let jobs: Vec<(BitString, BitString)> = (0..8)
        .map(|_| {
            let x = BitString::random(20_000, &mut rng);
            let mut y = x.clone();
            for i in (0..20_000).step_by(125) {
                y.flip(i);
            }
            (code.syndrome(&x).unwrap(), y)
        })
        .collect();
    let mut group = c.benchmark_group("ldpc_decode_8x20k");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map_slice(&jobs, |(s, y)| code.decode(y, s, 0.01).is_ok()))
        });
    }
    group.finish();
}

criterion_group!(benches, pass_simulation, batch_decode);
criterion_main!(benches);
