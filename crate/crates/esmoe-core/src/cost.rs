//! Cost accounting and the latency benchmark harness.
//!
//! Closed-form MAC/FLOP and parameter counts for experts and the gating
//! network, cross-checked by an instrumented reference convolution that
//! counts every multiply-accumulate it performs (padding taps included).
//! The latency harness times the block forward — gating, selected experts,
//! aggregation — in sparse and dense modes over the same input sequence and
//! reports median and tail percentiles.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{
    esmoe_forward, esmoe_forward_dense, EsMoeConfig, ExpertBank, ExpertBankBase, RoutingMode,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorBase};

/// RNG stream for the benchmark bank parameters.
const STREAM_BENCH_BANK: u64 = u64::MAX;
/// RNG stream base for warmup inputs (timed inputs use streams 0, 1, ...).
const STREAM_BENCH_WARMUP: u64 = 1 << 62;

/// Multiply-accumulates of one depthwise-separable expert on an HxW map:
/// depthwise H*W*C_in*k^2 plus pointwise H*W*C_in*C_out. Padding taps
/// count: the kernel window is evaluated in full at every position.
pub fn expert_macs(c_in: usize, c_out: usize, kernel: usize, h: usize, w: usize) -> usize {
    h * w * c_in * kernel * kernel + h * w * c_in * c_out
}

/// FLOPs of the gating network's two dense layers: one multiply and one add
/// per connection. Independent of the spatial size.
pub fn gating_dense_flops(cfg: &EsMoeConfig) -> usize {
    let hidden = cfg.gate_hidden();
    2 * (cfg.c_in * hidden + hidden * cfg.experts)
}

/// Additions performed by global average pooling on an HxW map.
pub fn gating_gap_flops(cfg: &EsMoeConfig, h: usize, w: usize) -> usize {
    h * w * cfg.c_in
}

/// Cost of one expert at a given spatial size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertCost {
    pub kernel: usize,
    pub macs: usize,
    /// 2 x MACs: one multiply and one add each.
    pub flops: usize,
    pub params: usize,
}

/// Analytic cost model of a block configuration at one spatial size.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub height: usize,
    pub width: usize,
    pub experts: Vec<ExpertCost>,
    pub gating_dense_flops: usize,
    pub gating_gap_flops: usize,
    pub gating_params: usize,
    /// All expert parameters plus gating parameters.
    pub total_params: usize,
}

impl CostModel {
    /// MACs of the experts a sparse forward evaluates, averaged over all
    /// possible top-k subsets (uniform over experts).
    pub fn mean_selected_expert_macs(&self, top_k: usize) -> f64 {
        let total: usize = self.experts.iter().map(|e| e.macs).sum();
        total as f64 * top_k as f64 / self.experts.len() as f64
    }
}

/// Closed-form cost counts for a configuration.
pub fn count_costs(cfg: &EsMoeConfig, h: usize, w: usize) -> Result<CostModel> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidDimensions { n: 1, c: cfg.c_in, h, w });
    }
    let experts: Vec<ExpertCost> = cfg
        .kernels
        .iter()
        .map(|&k| {
            let macs = expert_macs(cfg.c_in, cfg.c_out, k, h, w);
            ExpertCost {
                kernel: k,
                macs,
                flops: 2 * macs,
                params: crate::ops::ConvParams::param_count(cfg.c_in, cfg.c_out, k),
            }
        })
        .collect();
    let gating_params = ExpertBank::gating_param_count(cfg);
    let total_params = experts.iter().map(|e| e.params).sum::<usize>() + gating_params;
    Ok(CostModel {
        height: h,
        width: w,
        experts,
        gating_dense_flops: gating_dense_flops(cfg),
        gating_gap_flops: gating_gap_flops(cfg, h, w),
        gating_params,
        total_params,
    })
}

/// Reference depthwise-separable convolution that counts every multiply it
/// performs, by materializing the zero-padded input so padding taps execute
/// like any other. Returns the output (identical to the production kernel)
/// and the exact MAC count.
pub fn instrumented_expert_macs<T: Scalar>(
    x: &TensorBase<T>,
    p: &crate::ops::ConvParamsBase<T>,
) -> Result<(TensorBase<T>, u64)> {
    p.validate()?;
    let (n, c, h, w) = x.dims();
    if c != p.c_in {
        return Err(Error::ChannelMismatch { expected: p.c_in, got: c });
    }
    let k = p.kernel;
    let pad = (k - 1) / 2;
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let mut macs = 0u64;
    let mut out = TensorBase::zeros(n, p.c_out, h, w)?;
    let mut mid = vec![0.0f64; c];
    for bn in 0..n {
        // Zero-padded copy of the sample.
        let mut padded = vec![0.0f64; c * ph * pw];
        for bc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    padded[(bc * ph + y + pad) * pw + xx + pad] = x.at(bn, bc, y, xx);
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                for bc in 0..c {
                    let mut acc = p.dw_bias[bc].to_f64();
                    for ky in 0..k {
                        for kx in 0..k {
                            let v = padded[(bc * ph + y + ky) * pw + xx + kx];
                            acc += p.dw_kernel[(bc * k + ky) * k + kx].to_f64() * v;
                            macs += 1;
                        }
                    }
                    mid[bc] = acc;
                }
                for oc in 0..p.c_out {
                    let mut acc = p.pw_bias[oc].to_f64();
                    for bc in 0..c {
                        acc += p.pw_kernel[oc * c + bc].to_f64() * mid[bc];
                        macs += 1;
                    }
                    out.set(bn, oc, y, xx, acc);
                }
            }
        }
    }
    Ok((out, macs))
}

/// Activated parameters of a classifier built on the block: gating, head,
/// and the expected share of expert parameters a top-k forward touches
/// (k/E of the bank, since routing is input-dependent).
pub fn activated_param_count(cfg: &EsMoeConfig, classes: usize) -> f64 {
    let expert_sum: usize = cfg
        .kernels
        .iter()
        .map(|&k| crate::ops::ConvParams::param_count(cfg.c_in, cfg.c_out, k))
        .sum();
    let gating = ExpertBank::gating_param_count(cfg) as f64;
    let head = (classes * cfg.c_out + classes) as f64;
    gating + head + expert_sum as f64 * cfg.top_k as f64 / cfg.experts as f64
}

/// Find the output width for a single-expert (E=1, K=1, k=5) baseline whose
/// activated-parameter budget is closest to the given block's. Returns the
/// baseline configuration and the relative budget difference.
pub fn matched_baseline(cfg: &EsMoeConfig, classes: usize) -> (EsMoeConfig, f64) {
    let target = activated_param_count(cfg, classes);
    let mut best: Option<(EsMoeConfig, f64)> = None;
    for c_out in 1..=512usize {
        let mut candidate = EsMoeConfig::new(1, 1, cfg.c_in, c_out);
        candidate.kernels = vec![5];
        let budget = activated_param_count(&candidate, classes);
        let rel = (budget - target).abs() / target;
        if best.as_ref().map_or(true, |(_, b)| rel < *b) {
            best = Some((candidate, rel));
        }
    }
    best.expect("scan range is nonempty")
}

/// Execution mode of a latency measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// Hard top-k routing: only selected experts run.
    Sparse,
    /// Every expert runs; mixture uses full softmax probabilities.
    Dense,
}

impl BenchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMode::Sparse => "sparse",
            BenchMode::Dense => "dense",
        }
    }
}

/// Inputs of one latency measurement.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub cfg: EsMoeConfig,
    pub height: usize,
    pub width: usize,
    /// Timed repetitions; at least 30.
    pub repetitions: usize,
    /// Untimed warmup iterations; at least 5.
    pub warmup: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDimensions { n: 1, c: self.cfg.c_in, h: self.height, w: self.width });
        }
        if self.repetitions < 30 {
            return Err(Error::InvalidConfig {
                reason: format!("{} repetitions; at least 30 required for stable percentiles", self.repetitions),
            });
        }
        if self.warmup < 5 {
            return Err(Error::InvalidConfig {
                reason: format!("{} warmup iterations; at least 5 required", self.warmup),
            });
        }
        Ok(())
    }

    /// Short identifier used in result rows.
    pub fn config_id(&self) -> String {
        format!(
            "E{}-K{}-C{}x{}-{}x{}",
            self.cfg.experts, self.cfg.top_k, self.cfg.c_in, self.cfg.c_out, self.height, self.width
        )
    }
}

/// Summary of one latency measurement.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub config_id: String,
    pub mode: BenchMode,
    pub experts: usize,
    pub top_k: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    /// Expert evaluations performed during the timed repetitions.
    pub expert_evals: u64,
    /// Timed forward passes (one sample each).
    pub samples: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Measure block-forward latency. Every repetition uses a fresh random
/// input drawn from a sequence determined only by the `BenchSpec` seed, so
/// sparse and dense runs of the same `BenchSpec` see identical inputs.
pub fn run_latency(spec: &BenchSpec, mode: BenchMode) -> Result<BenchResult> {
    spec.validate()?;
    let run_cfg = spec.cfg.with_mode(RoutingMode::Inference);
    let mut bank_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    bank_rng.set_stream(STREAM_BENCH_BANK);
    let bank = ExpertBankBase::<f32>::init(&run_cfg, &mut bank_rng)?;

    let draw_input = |stream: u64| -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        Tensor::random_uniform(1, run_cfg.c_in, spec.height, spec.width, -1.0, 1.0, &mut rng)
    };
    let forward = |x: &Tensor| -> Result<()> {
        match mode {
            BenchMode::Sparse => esmoe_forward(x, &bank, &run_cfg).map(|_| ()),
            BenchMode::Dense => esmoe_forward_dense(x, &bank, &run_cfg).map(|_| ()),
        }
    };

    for j in 0..spec.warmup {
        let x = draw_input(STREAM_BENCH_WARMUP + j as u64)?;
        forward(&x)?;
    }

    let inputs: Vec<Tensor> = (0..spec.repetitions)
        .map(|i| draw_input(i as u64))
        .collect::<Result<_>>()?;
    bank.reset_expert_evals();
    let mut times_us = Vec::with_capacity(spec.repetitions);
    for x in &inputs {
        let start = Instant::now();
        forward(x)?;
        times_us.push(start.elapsed().as_secs_f64() * 1e6);
    }
    let expert_evals = bank.expert_evals();

    times_us.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let median_us = percentile(&times_us, 50.0);
    if median_us < 1.0 {
        return Err(Error::TimerResolution { median_us });
    }
    Ok(BenchResult {
        config_id: spec.config_id(),
        mode,
        experts: run_cfg.experts,
        top_k: run_cfg.top_k,
        median_us,
        p10_us: percentile(&times_us, 10.0),
        p90_us: percentile(&times_us, 90.0),
        expert_evals,
        samples: spec.repetitions as u64,
    })
}

/// Median-latency ratio of a sparse run over its dense counterpart.
pub fn speedup_ratio(sparse: &BenchResult, dense: &BenchResult) -> f64 {
    sparse.median_us / dense.median_us
}

/// Header of the benchmark CSV.
pub const BENCH_CSV_HEADER: &str =
    "config_id,mode,experts,top_k,median_us,p10_us,p90_us,expert_evals,samples";

fn result_row(r: &BenchResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        r.config_id,
        r.mode.as_str(),
        r.experts,
        r.top_k,
        r.median_us,
        r.p10_us,
        r.p90_us,
        r.expert_evals,
        r.samples
    )
}

/// Append results to a CSV file, writing the header first when the file is
/// new or empty.
pub fn append_csv<P: AsRef<Path>>(path: P, results: &[BenchResult]) -> Result<()> {
    let path = path.as_ref();
    let empty = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if empty {
        file.write_all(BENCH_CSV_HEADER.as_bytes())?;
        file.write_all(b"\n")?;
    }
    for r in results {
        file.write_all(result_row(r).as_bytes())?;
    }
    file.flush()?;
    Ok(())
}
