//! Shared fixtures for the latency benchmarks and their statistical tests.
//!
//! Everything latency-related funnels through the core measurement
//! protocol (seeded inputs, warmup, median of R single-threaded
//! repetitions); this crate only decides which configurations to time.

use esmoe_core::cost::BenchSpec;
use esmoe_core::EsMoeConfig;

/// Benchmark spec at the standard geometry: E experts over `c`-channel
/// inputs of `h` x `w`, square channel mapping (c_out = c_in).
pub fn bench_spec(
    experts: usize,
    top_k: usize,
    c: usize,
    h: usize,
    w: usize,
    repetitions: usize,
    seed: u64,
) -> BenchSpec {
    BenchSpec {
        cfg: EsMoeConfig::new(experts, top_k, c, c),
        height: h,
        width: w,
        repetitions,
        warmup: 5,
        seed,
    }
}

/// p10/p90 bands of two latency results overlap: the usual reason one
/// median may sit above another without evidence of a real ordering.
pub fn bands_overlap(a: &esmoe_core::cost::BenchResult, b: &esmoe_core::cost::BenchResult) -> bool {
    a.p10_us <= b.p90_us && b.p10_us <= a.p90_us
}
