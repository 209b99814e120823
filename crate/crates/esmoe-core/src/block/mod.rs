//! The sparse mixture-of-experts convolution block.
//!
//! A bank of depthwise-separable experts with distinct odd kernel sizes sits
//! behind a small gating network (global average pool, two 1x1 layers with a
//! SiLU between them). Per sample, the gate's logits pick the top-k experts;
//! only those experts run, and their outputs are mixed by the routing
//! weights. An atomic counter records every expert evaluation so tests can
//! verify that skipped experts genuinely never execute.

mod routing;

pub use routing::{route, RoutingOutcome};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{
    dwconv_backward, dwconv_forward, gap, gap_backward, pointwise1x1_backward,
    pointwise1x1_forward, silu, silu_backward, ConvParamsBase,
};
use crate::tensor::{Scalar, TensorBase};

/// Guard inside the optional RMS output normalization.
const RMS_EPS: f64 = 1e-6;

/// Smallest scale-ladder threshold, as a mean-activation level (see `init`).
const GATE_LADDER_MIN: f64 = 0.009;

/// Largest scale-ladder threshold, as a mean-activation level (see `init`).
const GATE_LADDER_MAX: f64 = 0.72;

/// Pre-activation value of every ladder unit at zero input; also bounds
/// each unit's output, since ladder slopes are scaled by 1/threshold.
const GATE_LADDER_GAIN: f64 = 3.0;

/// Magnitude of the structured entries in the gate readout layer.
const GATE_READOUT_SCALE: f64 = 0.5;

/// Relative jitter applied to structured gate parameters at init.
const GATE_INIT_JITTER: f64 = 0.05;

/// Routing phase. Training keeps the masked softmax differentiable;
/// inference evaluates only the selected experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    Training,
    Inference,
}

/// Static configuration of the block.
#[derive(Clone, Debug, PartialEq)]
pub struct EsMoeConfig {
    /// Number of experts in the bank.
    pub experts: usize,
    /// Experts evaluated per sample.
    pub top_k: usize,
    /// Depthwise kernel size per expert. Length must equal `experts`; all odd.
    pub kernels: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
    /// Channel reduction ratio of the gate's hidden layer.
    pub reduction_ratio: usize,
    /// Guard added to the retained probability mass before renormalizing.
    pub renorm_epsilon: f64,
    pub mode: RoutingMode,
    /// Optional per-channel RMS normalization of the mixed output.
    pub rms_norm: bool,
}

impl EsMoeConfig {
    /// Configuration with the default kernel ladder, reduction ratio 8,
    /// renormalization guard 1e-9, training mode, and no output norm.
    pub fn new(experts: usize, top_k: usize, c_in: usize, c_out: usize) -> Self {
        EsMoeConfig {
            experts,
            top_k,
            kernels: Self::default_kernels(experts),
            c_in,
            c_out,
            reduction_ratio: 8,
            renorm_epsilon: 1e-9,
            mode: RoutingMode::Training,
            rms_norm: false,
        }
    }

    /// The odd kernel ladder 3, 5, 7, 9 cycled to the expert count.
    pub fn default_kernels(experts: usize) -> Vec<usize> {
        const LADDER: [usize; 4] = [3, 5, 7, 9];
        (0..experts).map(|i| LADDER[i % LADDER.len()]).collect()
    }

    /// Hidden width of the gate: c_in / reduction_ratio, floored at 8.
    pub fn gate_hidden(&self) -> usize {
        (self.c_in / self.reduction_ratio).max(8)
    }

    /// Fraction of the expert bank skipped at inference: (E - K) / E.
    pub fn sparsity_fraction(&self) -> f64 {
        (self.experts - self.top_k) as f64 / self.experts as f64
    }

    pub fn with_mode(&self, mode: RoutingMode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::InvalidConfig { reason: "expert count must be nonzero".into() });
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::InvalidConfig {
                reason: format!("top_k {} must lie in 1..={}", self.top_k, self.experts),
            });
        }
        if self.kernels.len() != self.experts {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "kernel list has {} entries for {} experts",
                    self.kernels.len(),
                    self.experts
                ),
            });
        }
        for &k in &self.kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::EvenKernel { size: k });
            }
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidConfig { reason: "channel counts must be nonzero".into() });
        }
        if self.reduction_ratio == 0 {
            return Err(Error::InvalidConfig { reason: "reduction ratio must be nonzero".into() });
        }
        if !(self.renorm_epsilon > 0.0) || !self.renorm_epsilon.is_finite() {
            return Err(Error::InvalidConfig {
                reason: "renormalization epsilon must be a positive finite value".into(),
            });
        }
        Ok(())
    }
}

/// The expert bank plus gating network parameters.
#[derive(Debug)]
pub struct ExpertBankBase<T> {
    pub experts: Vec<ConvParamsBase<T>>,
    /// Gate hidden layer, laid out (gate_hidden, c_in).
    pub gate_w1: Vec<T>,
    pub gate_b1: Vec<T>,
    /// Gate output layer, laid out (experts, gate_hidden).
    pub gate_w2: Vec<T>,
    pub gate_b2: Vec<T>,
    /// Total expert evaluations performed through this bank.
    evals: AtomicU64,
}

pub type ExpertBank = ExpertBankBase<f32>;

impl<T: Scalar> Clone for ExpertBankBase<T> {
    fn clone(&self) -> Self {
        ExpertBankBase {
            experts: self.experts.clone(),
            gate_w1: self.gate_w1.clone(),
            gate_b1: self.gate_b1.clone(),
            gate_w2: self.gate_w2.clone(),
            gate_b2: self.gate_b2.clone(),
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> ExpertBankBase<T> {
    /// All-zero parameters in the shapes the configuration demands.
    pub fn zeros(cfg: &EsMoeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut experts = Vec::with_capacity(cfg.experts);
        for i in 0..cfg.experts {
            experts.push(ConvParamsBase::zeros(cfg.c_in, cfg.c_out, cfg.kernels[i])?);
        }
        let hidden = cfg.gate_hidden();
        Ok(ExpertBankBase {
            experts,
            gate_w1: vec![T::from_f64(0.0); hidden * cfg.c_in],
            gate_b1: vec![T::from_f64(0.0); hidden],
            gate_w2: vec![T::from_f64(0.0); cfg.experts * hidden],
            gate_b2: vec![T::from_f64(0.0); cfg.experts],
            evals: AtomicU64::new(0),
        })
    }

    /// Scale-ladder initialization.
    ///
    /// Experts get the usual uniform +-sqrt(1/fan_in) draw. The gate is
    /// built so that, from the first step, every expert is selected on a
    /// nontrivial share of inputs — a requirement for balanced routing to
    /// be trainable at all: an expert the router never selects receives no
    /// routing gradient (its mask entry is zero, and the renormalization
    /// cancels common-mode pressure on the remaining weights), so a
    /// starved expert at step 0 usually stays starved forever.
    ///
    /// The gate reads channel means, which for image-like data are a
    /// content-scale statistic. Consecutive hidden-unit pairs implement
    /// triangular band responses over that statistic: unit pre-activations
    /// are `gain - (gain/theta) * mean`, descending ramps that cross zero
    /// at geometrically spaced thresholds `theta` covering roughly
    /// [1%, 70%] of the unit activation range, and the difference of a
    /// pair of consecutive ramps is a bounded bump peaked between its two
    /// thresholds. The readout starts each expert on its own band, in
    /// expert order — matching the kernel-size order, so experts with
    /// larger receptive fields begin slightly predisposed to larger-scale
    /// content. Small multiplicative jitter breaks symmetry. Training
    /// remains free to reshape the partition; the init only guarantees a
    /// covered, flip-rich starting point.
    ///
    /// Full band coverage needs `gate_hidden() >= 2 * experts`; any spare
    /// hidden units, or experts beyond the available pairs, fall back to
    /// plain uniform draws.
    pub fn init<R: Rng>(cfg: &EsMoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut experts = Vec::with_capacity(cfg.experts);
        for i in 0..cfg.experts {
            experts.push(ConvParamsBase::init(cfg.c_in, cfg.c_out, cfg.kernels[i], rng)?);
        }
        let hidden = cfg.gate_hidden();
        let pairs = (hidden / 2).min(cfg.experts);
        let ratio = (GATE_LADDER_MAX / GATE_LADDER_MIN).powf(1.0 / cfg.experts as f64);
        let uniform = (1.0 / cfg.c_in as f64).sqrt();
        let mut gate_w1 = vec![T::from_f64(0.0); hidden * cfg.c_in];
        let mut gate_b1 = vec![T::from_f64(0.0); hidden];
        for j in 0..hidden {
            let band = j / 2;
            if band < pairs {
                // Ladder unit: descending ramp over the channel mean,
                // zero-crossing at this band's low (even j) or high
                // (odd j) threshold. Slope 1/theta bounds the unit's
                // output by roughly the gain for inputs in [0, 1].
                let theta = GATE_LADDER_MIN * ratio.powi(band as i32 + (j % 2) as i32);
                let slope = GATE_LADDER_GAIN / theta;
                for c in 0..cfg.c_in {
                    let jit = 1.0 + rng.gen_range(-GATE_INIT_JITTER..=GATE_INIT_JITTER);
                    gate_w1[j * cfg.c_in + c] = T::from_f64(-slope * jit / cfg.c_in as f64);
                }
                let jit = 1.0 + rng.gen_range(-GATE_INIT_JITTER..=GATE_INIT_JITTER);
                gate_b1[j] = T::from_f64(GATE_LADDER_GAIN * jit);
            } else {
                for c in 0..cfg.c_in {
                    gate_w1[j * cfg.c_in + c] = T::from_f64(rng.gen_range(-uniform..=uniform));
                }
                gate_b1[j] = T::from_f64(rng.gen_range(-uniform..=uniform));
            }
        }
        // Readout: expert i subtracts its band's low ramp from the high
        // one (a bump over the band), plus small noise everywhere. Biases
        // start at zero so no expert holds an input-independent head
        // start.
        let mut gate_w2 = vec![T::from_f64(0.0); cfg.experts * hidden];
        for i in 0..cfg.experts {
            for j in 0..hidden {
                let structured = if i < pairs && j / 2 == i {
                    if j % 2 == 1 {
                        GATE_READOUT_SCALE
                    } else {
                        -GATE_READOUT_SCALE
                    }
                } else {
                    0.0
                };
                let noise = GATE_READOUT_SCALE * 0.1 * rng.gen_range(-1.0..=1.0);
                gate_w2[i * hidden + j] = T::from_f64(structured + noise);
            }
        }
        let gate_b2 = (0..cfg.experts).map(|_| T::from_f64(0.0)).collect();
        Ok(ExpertBankBase {
            experts,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
            evals: AtomicU64::new(0),
        })
    }

    /// Shared-function initialization: every expert starts computing the
    /// SAME function. One seed expert is drawn at the smallest configured
    /// kernel size; its depthwise kernel is embedded centered in each
    /// expert's (possibly larger) kernel with zeros outside, and the
    /// pointwise stage is copied verbatim. Embedding zeros around a kernel
    /// leaves the convolution's output unchanged everywhere, including at
    /// the padded border, so the identity is exact.
    ///
    /// Rationale: with independently random experts, the task loss ranks
    /// them within the first optimizer steps and the winners' selection
    /// advantage compounds — unselected experts never learn, so they never
    /// recover, and the load-balancing loss cannot reach them through the
    /// masked routing weights. Starting the experts identical removes that
    /// early ranking signal entirely; selection frequencies equalize under
    /// the load-balancing pressure first, and the experts then diverge
    /// through the different samples each one is routed.
    pub fn init_shared<R: Rng>(cfg: &EsMoeConfig, rng: &mut R) -> Result<Self> {
        let mut bank = Self::init(cfg, rng)?;
        let k_min = *cfg.kernels.iter().min().expect("validated nonempty kernels");
        let seed = ConvParamsBase::<T>::init(cfg.c_in, cfg.c_out, k_min, rng)?;
        for (i, expert) in bank.experts.iter_mut().enumerate() {
            let k = cfg.kernels[i];
            let off = (k - k_min) / 2;
            let mut p = ConvParamsBase::<T>::zeros(cfg.c_in, cfg.c_out, k)?;
            for c in 0..cfg.c_in {
                for y in 0..k_min {
                    for x in 0..k_min {
                        p.dw_kernel[(c * k + y + off) * k + x + off] =
                            seed.dw_kernel[(c * k_min + y) * k_min + x];
                    }
                }
            }
            p.dw_bias = seed.dw_bias.clone();
            p.pw_kernel = seed.pw_kernel.clone();
            p.pw_bias = seed.pw_bias.clone();
            *expert = p;
        }
        Ok(bank)
    }

    /// Structural validation against a configuration.
    pub fn validate(&self, cfg: &EsMoeConfig) -> Result<()> {
        cfg.validate()?;
        if self.experts.len() != cfg.experts {
            return Err(Error::ConfigMismatch {
                reason: format!("bank has {} experts, config says {}", self.experts.len(), cfg.experts),
            });
        }
        for (i, p) in self.experts.iter().enumerate() {
            p.validate()?;
            if p.c_in != cfg.c_in || p.c_out != cfg.c_out || p.kernel != cfg.kernels[i] {
                return Err(Error::ConfigMismatch {
                    reason: format!(
                        "expert {} is {}x{} k={}, config wants {}x{} k={}",
                        i, p.c_in, p.c_out, p.kernel, cfg.c_in, cfg.c_out, cfg.kernels[i]
                    ),
                });
            }
        }
        let hidden = cfg.gate_hidden();
        let lens = [
            (self.gate_w1.len(), hidden * cfg.c_in),
            (self.gate_b1.len(), hidden),
            (self.gate_w2.len(), cfg.experts * hidden),
            (self.gate_b2.len(), cfg.experts),
        ];
        for (got, expected) in lens {
            if got != expected {
                return Err(Error::DataLength { expected, got });
            }
        }
        let finite = self
            .gate_w1
            .iter()
            .chain(&self.gate_b1)
            .chain(&self.gate_w2)
            .chain(&self.gate_b2)
            .all(|v| v.is_finite_value());
        if !finite {
            return Err(Error::NonFinite { context: "gate parameters" });
        }
        Ok(())
    }

    /// Expert evaluations performed so far.
    pub fn expert_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_expert_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub(crate) fn note_evals(&self, n: u64) {
        self.evals.fetch_add(n, Ordering::Relaxed);
    }

    /// Closed-form gate parameter count:
    /// c_in * hidden + hidden + hidden * experts + experts.
    pub fn gating_param_count(cfg: &EsMoeConfig) -> usize {
        let hidden = cfg.gate_hidden();
        cfg.c_in * hidden + hidden + hidden * cfg.experts + cfg.experts
    }

    /// Closed-form total parameter count of the bank.
    pub fn param_count(cfg: &EsMoeConfig) -> usize {
        let expert_sum: usize = cfg
            .kernels
            .iter()
            .map(|&k| ConvParamsBase::<T>::param_count(cfg.c_in, cfg.c_out, k))
            .sum();
        expert_sum + Self::gating_param_count(cfg)
    }

    /// Parameter count by enumerating the stored buffers.
    pub fn stored_param_count(&self) -> usize {
        let expert_sum: usize = self.experts.iter().map(|p| p.stored_param_count()).sum();
        expert_sum
            + self.gate_w1.len()
            + self.gate_b1.len()
            + self.gate_w2.len()
            + self.gate_b2.len()
    }
}

/// Parameter-shaped gradients for the bank. Expert entries that no sample
/// selected stay exactly zero.
#[derive(Clone, Debug)]
pub struct BankGradients<T> {
    pub experts: Vec<ConvParamsBase<T>>,
    pub gate_w1: Vec<T>,
    pub gate_b1: Vec<T>,
    pub gate_w2: Vec<T>,
    pub gate_b2: Vec<T>,
}

/// Cached intermediates of the gate chain.
pub(crate) struct GateCache<T> {
    pub pooled: TensorBase<T>,
    pub hidden_pre: TensorBase<T>,
    pub hidden_act: TensorBase<T>,
    pub logits: TensorBase<T>,
}

/// Everything the backward pass needs from a forward pass.
pub(crate) struct BlockCache<T> {
    pub gate: GateCache<T>,
    pub routing: RoutingOutcome,
    /// Per sample: the experts that ran and their raw outputs.
    pub expert_out: Vec<Vec<(usize, TensorBase<T>)>>,
    /// Mixture before the optional output normalization.
    pub aggregated: TensorBase<T>,
    pub output: TensorBase<T>,
}

fn gate_forward<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
) -> Result<GateCache<T>> {
    let pooled = gap(x)?;
    let hidden_pre = pointwise1x1_forward(&pooled, &bank.gate_w1, &bank.gate_b1, cfg.gate_hidden())?;
    let hidden_act = silu(&hidden_pre)?;
    let logits = pointwise1x1_forward(&hidden_act, &bank.gate_w2, &bank.gate_b2, cfg.experts)?;
    Ok(GateCache { pooled, hidden_pre, hidden_act, logits })
}

/// Gate logits for a batch, flattened row-major (samples x experts).
pub fn gate_logits<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
) -> Result<Vec<f64>> {
    bank.validate(cfg)?;
    if x.channels() != cfg.c_in {
        return Err(Error::ChannelMismatch { expected: cfg.c_in, got: x.channels() });
    }
    let cache = gate_forward(x, bank, cfg)?;
    Ok(cache.logits.data().iter().map(|v| v.to_f64()).collect())
}

fn rms_normalize<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (n, c, h, w) = x.dims();
    let plane = (h * w) as f64;
    let mut out = TensorBase::zeros(n, c, h, w)?;
    for bn in 0..n {
        for bc in 0..c {
            let mut sq = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(bn, bc, y, xx);
                    sq += v * v;
                }
            }
            let r = (sq / plane + RMS_EPS).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    out.set(bn, bc, y, xx, x.at(bn, bc, y, xx) / r);
                }
            }
        }
    }
    Ok(out)
}

/// Backward of the per-channel RMS normalization for one channel plane.
fn rms_backward_plane(values: &[f64], grads: &[f64]) -> Vec<f64> {
    let plane = values.len() as f64;
    let sq: f64 = values.iter().map(|v| v * v).sum();
    let r = (sq / plane + RMS_EPS).sqrt();
    let dot: f64 = grads.iter().zip(values).map(|(g, v)| g * v).sum();
    values
        .iter()
        .zip(grads)
        .map(|(v, g)| g / r - v * dot / (plane * r * r * r))
        .collect()
}

pub(crate) fn forward_cached<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
    dense: bool,
) -> Result<BlockCache<T>> {
    bank.validate(cfg)?;
    if x.channels() != cfg.c_in {
        return Err(Error::ChannelMismatch { expected: cfg.c_in, got: x.channels() });
    }
    x.ensure_finite("block input")?;

    let (n, _, h, w) = x.dims();
    let e = cfg.experts;
    let gate = gate_forward(x, bank, cfg)?;
    let logit_rows: Vec<f64> = gate.logits.data().iter().map(|v| v.to_f64()).collect();
    let routing = route(&logit_rows, n, cfg)?;

    let mut aggregated = TensorBase::zeros(n, cfg.c_out, h, w)?;
    let mut expert_out: Vec<Vec<(usize, TensorBase<T>)>> = Vec::with_capacity(n);
    let plane = cfg.c_out * h * w;
    let mut mix = vec![0.0f64; plane];

    for bn in 0..n {
        let xs = x.sample(bn);
        mix.iter_mut().for_each(|v| *v = 0.0);
        let indices: Vec<usize> = if dense {
            (0..e).collect()
        } else {
            routing.selected_row(bn).to_vec()
        };
        let mut outs = Vec::with_capacity(indices.len());
        for &i in &indices {
            let y_i = dwconv_forward(&xs, &bank.experts[i])?;
            bank.note_evals(1);
            let weight = if dense {
                routing.probs_row(bn)[i]
            } else {
                routing.weights_row(bn)[i]
            };
            for (j, v) in y_i.data().iter().enumerate() {
                mix[j] += weight * v.to_f64();
            }
            outs.push((i, y_i));
        }
        let mut sample_out = TensorBase::zeros(1, cfg.c_out, h, w)?;
        for (j, v) in mix.iter().enumerate() {
            sample_out.data_mut()[j] = T::from_f64(*v);
        }
        aggregated.set_sample(bn, &sample_out);
        expert_out.push(outs);
    }

    let output = if cfg.rms_norm { rms_normalize(&aggregated)? } else { aggregated.clone() };
    output.ensure_finite("block output")?;
    Ok(BlockCache { gate, routing, expert_out, aggregated, output })
}

/// Forward pass honoring the configured routing mode. Only the selected
/// experts are evaluated; the evaluation counter advances by k per sample.
pub fn esmoe_forward<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
) -> Result<(TensorBase<T>, RoutingOutcome)> {
    let cache = forward_cached(x, bank, cfg, false)?;
    Ok((cache.output, cache.routing))
}

/// Dense reference execution: every expert runs and the mixture uses the
/// full softmax probabilities. With top_k = experts this coincides with the
/// sparse path. The evaluation counter advances by E per sample.
pub fn esmoe_forward_dense<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
) -> Result<(TensorBase<T>, RoutingOutcome)> {
    let cache = forward_cached(x, bank, cfg, true)?;
    Ok((cache.output, cache.routing))
}

pub(crate) fn backward_cached<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
    cache: &BlockCache<T>,
    grad_y: &TensorBase<T>,
    extra_weights_grad: Option<&[f64]>,
) -> Result<(TensorBase<T>, BankGradients<T>)> {
    if cfg.mode != RoutingMode::Training {
        return Err(Error::InferenceModeBackward);
    }
    let (n, _, h, w) = x.dims();
    let e = cfg.experts;
    let expected = (n, cfg.c_out, h, w);
    if grad_y.dims() != expected {
        return Err(Error::ShapeMismatch { expected, got: grad_y.dims() });
    }
    grad_y.ensure_finite("block output gradient")?;
    if let Some(extra) = extra_weights_grad {
        if extra.len() != n * e {
            return Err(Error::DataLength { expected: n * e, got: extra.len() });
        }
        if !extra.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "extra routing gradient" });
        }
    }

    // Per-expert f64 accumulators, kept zero for never-selected experts.
    let mut acc: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = cfg
        .kernels
        .iter()
        .map(|&k| {
            (
                vec![0.0f64; cfg.c_in * k * k],
                vec![0.0f64; cfg.c_in],
                vec![0.0f64; cfg.c_out * cfg.c_in],
                vec![0.0f64; cfg.c_out],
            )
        })
        .collect();
    let mut g_x_experts = vec![0.0f64; x.len()];
    let mut g_logits = TensorBase::<T>::zeros(n, e, 1, 1)?;
    let sample_stride = cfg.c_in * h * w;

    for bn in 0..n {
        let xs = x.sample(bn);
        let g_out = grad_y.sample(bn);
        // Backward through the optional output normalization.
        let g_agg = if cfg.rms_norm {
            let agg = cache.aggregated.sample(bn);
            let mut g = TensorBase::<T>::zeros(1, cfg.c_out, h, w)?;
            for bc in 0..cfg.c_out {
                let vals: Vec<f64> = (0..h * w)
                    .map(|j| agg.at(0, bc, j / w, j % w))
                    .collect();
                let gs: Vec<f64> = (0..h * w)
                    .map(|j| g_out.at(0, bc, j / w, j % w))
                    .collect();
                let back = rms_backward_plane(&vals, &gs);
                for (j, v) in back.iter().enumerate() {
                    g.set(0, bc, j / w, j % w, *v);
                }
            }
            g
        } else {
            g_out
        };

        // Expert paths: parameter gradients and the input gradient, plus the
        // scalar gradient with respect to each applied weight.
        let mut g_weights = vec![0.0f64; e];
        for (i, y_i) in &cache.expert_out[bn] {
            let weight = cache.routing.weights_row(bn)[*i];
            g_weights[*i] = g_agg
                .data()
                .iter()
                .zip(y_i.data())
                .map(|(g, v)| g.to_f64() * v.to_f64())
                .sum();
            let scaled = g_agg.map(|v| v * weight);
            let (gx_i, gp_i) = dwconv_backward(&xs, &bank.experts[*i], &scaled)?;
            let slot = &mut acc[*i];
            for (d, s) in slot.0.iter_mut().zip(&gp_i.dw_kernel) {
                *d += s.to_f64();
            }
            for (d, s) in slot.1.iter_mut().zip(&gp_i.dw_bias) {
                *d += s.to_f64();
            }
            for (d, s) in slot.2.iter_mut().zip(&gp_i.pw_kernel) {
                *d += s.to_f64();
            }
            for (d, s) in slot.3.iter_mut().zip(&gp_i.pw_bias) {
                *d += s.to_f64();
            }
            for (j, v) in gx_i.data().iter().enumerate() {
                g_x_experts[bn * sample_stride + j] += v.to_f64();
            }
        }

        // Routing backward: applied weights -> full softmax -> logits. Any
        // extra gradient on the routing weights (the load-balancing path)
        // joins before the soft top-k backward.
        if let Some(extra) = extra_weights_grad {
            for i in 0..e {
                g_weights[i] += extra[bn * e + i];
            }
        }
        let probs = cache.routing.probs_row(bn);
        let selected = cache.routing.selected_row(bn);
        let g_probs = routing::soft_topk_backward(probs, selected, &g_weights, cfg.renorm_epsilon);
        let g_row = routing::softmax_row_backward(probs, &g_probs);
        for i in 0..e {
            g_logits.set(bn, i, 0, 0, g_row[i]);
        }
    }

    // Gate chain backward over the whole batch.
    let (g_hidden_act, g_w2, g_b2) =
        pointwise1x1_backward(&cache.gate.hidden_act, &bank.gate_w2, e, &g_logits)?;
    let g_hidden_pre = silu_backward(&cache.gate.hidden_pre, &g_hidden_act)?;
    let (g_pooled, g_w1, g_b1) =
        pointwise1x1_backward(&cache.gate.pooled, &bank.gate_w1, cfg.gate_hidden(), &g_hidden_pre)?;
    let g_x_gate = gap_backward(&g_pooled, h, w)?;

    let mut grad_x = TensorBase::zeros(n, cfg.c_in, h, w)?;
    for (j, v) in g_x_experts.iter().enumerate() {
        grad_x.data_mut()[j] = T::from_f64(*v);
    }
    let grad_x = grad_x.add(&g_x_gate)?;
    grad_x.ensure_finite("block input gradient")?;

    let experts = acc
        .into_iter()
        .zip(&cfg.kernels)
        .map(|((dwk, dwb, pwk, pwb), &k)| ConvParamsBase {
            c_in: cfg.c_in,
            c_out: cfg.c_out,
            kernel: k,
            dw_kernel: dwk.into_iter().map(T::from_f64).collect(),
            dw_bias: dwb.into_iter().map(T::from_f64).collect(),
            pw_kernel: pwk.into_iter().map(T::from_f64).collect(),
            pw_bias: pwb.into_iter().map(T::from_f64).collect(),
        })
        .collect();

    Ok((
        grad_x,
        BankGradients { experts, gate_w1: g_w1, gate_b1: g_b1, gate_w2: g_w2, gate_b2: g_b2 },
    ))
}

/// Backward pass of the block in training mode. Returns the input gradient
/// and parameter-shaped bank gradients; experts outside every sample's
/// selection receive exactly-zero gradients.
pub fn esmoe_backward<T: Scalar>(
    x: &TensorBase<T>,
    bank: &ExpertBankBase<T>,
    cfg: &EsMoeConfig,
    grad_y: &TensorBase<T>,
) -> Result<(TensorBase<T>, BankGradients<T>)> {
    let cache = forward_cached(x, bank, cfg, false)?;
    backward_cached(x, bank, cfg, &cache, grad_y, None)
}
