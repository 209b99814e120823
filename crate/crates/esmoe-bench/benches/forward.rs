//! Criterion benchmarks of the expert stage: hard top-k sparse forward at
//! K = 1, 2, 4 against the dense all-expert forward, E = 4 experts over
//! 32-channel 64x64 inputs. Run with `cargo bench -p esmoe-bench`.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use esmoe_core::{esmoe_forward, esmoe_forward_dense, EsMoeConfig, ExpertBank, RoutingMode, Tensor};

const CHANNELS: usize = 32;
const HEIGHT: usize = 64;
const WIDTH: usize = 64;

fn fixture(cfg: &EsMoeConfig) -> (ExpertBank, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bank = ExpertBank::init(cfg, &mut rng).expect("bank");
    let x = Tensor::random_uniform(1, cfg.c_in, HEIGHT, WIDTH, -1.0, 1.0, &mut rng).expect("input");
    (bank, x)
}

fn expert_stage(c: &mut Criterion) {
    let mut group = c.benchmark_group("expert_stage");
    group.sample_size(10).measurement_time(Duration::from_secs(3));

    for &k in &[1usize, 2, 4] {
        let cfg =
            EsMoeConfig::new(4, k, CHANNELS, CHANNELS).with_mode(RoutingMode::Inference);
        let (bank, x) = fixture(&cfg);
        group.bench_with_input(BenchmarkId::new("sparse_top_k", k), &k, |b, _| {
            b.iter(|| esmoe_forward(&x, &bank, &cfg).expect("forward"));
        });
    }

    let cfg = EsMoeConfig::new(4, 2, CHANNELS, CHANNELS).with_mode(RoutingMode::Inference);
    let (bank, x) = fixture(&cfg);
    group.bench_function("dense_all_experts", |b| {
        b.iter(|| esmoe_forward_dense(&x, &bank, &cfg).expect("forward"));
    });

    group.finish();
}

criterion_group!(benches, expert_stage);
criterion_main!(benches);
