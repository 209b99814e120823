//! Classifier model and training loop.
//!
//! The model under test is deliberately minimal: the sparse
//! mixture-of-experts block, global average pooling, and one linear head.
//! Training uses momentum SGD with a per-step cosine learning-rate decay,
//! soft routing for gradients, and hard routing for validation, so every run
//! exercises the soft/hard switch. All iteration orders and reductions are
//! fixed, making runs bit-for-bit reproducible for a given configuration.

mod report;
mod sgd;

pub use report::{EpochMetrics, TrainReport};
pub use sgd::{CosineSchedule, Sgd};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{
    backward_cached, esmoe_forward, forward_cached, BankGradients, EsMoeConfig, ExpertBankBase,
    RoutingMode, RoutingOutcome,
};
use crate::data::{batch_from_indices, generate, DatasetSpec, SynthSample};
use crate::error::{Error, Result};
use crate::loss::{
    entropy_bits, lb_weights_grad, load_balance_loss, task_loss_softmax_ce, total_loss,
    utilization, LossBreakdown, UtilizationStats,
};
use crate::ops::{gap, gap_backward, pointwise1x1_backward, pointwise1x1_forward};
use crate::tensor::{Scalar, TensorBase};

/// RNG stream reserved for model initialization (dataset samples use their
/// own index as the stream).
const STREAM_MODEL_INIT: u64 = u64::MAX;
/// Base RNG stream for per-epoch shuffles.
const STREAM_SHUFFLE_BASE: u64 = 1 << 63;

/// Mixture-of-experts block + global average pooling + linear head.
#[derive(Clone, Debug)]
pub struct ClassifierBase<T: Scalar> {
    pub cfg: EsMoeConfig,
    pub classes: usize,
    pub bank: ExpertBankBase<T>,
    /// Head weights, laid out (classes, c_out).
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

pub type Classifier = ClassifierBase<f32>;

/// Parameter-shaped gradients of a classifier.
#[derive(Clone, Debug)]
pub struct ModelGradients<T> {
    pub bank: BankGradients<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

impl<T: Scalar> ModelGradients<T> {
    /// Flatten into the classifier's canonical parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.bank.experts {
            out.extend(e.dw_kernel.iter().map(|v| v.to_f64()));
            out.extend(e.dw_bias.iter().map(|v| v.to_f64()));
            out.extend(e.pw_kernel.iter().map(|v| v.to_f64()));
            out.extend(e.pw_bias.iter().map(|v| v.to_f64()));
        }
        out.extend(self.bank.gate_w1.iter().map(|v| v.to_f64()));
        out.extend(self.bank.gate_b1.iter().map(|v| v.to_f64()));
        out.extend(self.bank.gate_w2.iter().map(|v| v.to_f64()));
        out.extend(self.bank.gate_b2.iter().map(|v| v.to_f64()));
        out.extend(self.head_w.iter().map(|v| v.to_f64()));
        out.extend(self.head_b.iter().map(|v| v.to_f64()));
        out
    }
}

/// Everything one optimization step computes before the update.
pub struct StepOutput<T> {
    pub breakdown: LossBreakdown,
    pub grads: ModelGradients<T>,
    /// Class logits, (N, classes, 1, 1).
    pub logits: TensorBase<T>,
    pub routing: RoutingOutcome,
}

impl<T: Scalar> ClassifierBase<T> {
    /// Training initialization: shared-function experts (see
    /// `ExpertBankBase::init_shared`) plus a head drawn from the same
    /// uniform +-sqrt(1/fan_in) family as every other layer.
    pub fn init<R: Rng>(cfg: &EsMoeConfig, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidConfig { reason: "class count must be nonzero".into() });
        }
        let bank = ExpertBankBase::init_shared(cfg, rng)?;
        let bound = (1.0 / cfg.c_out as f64).sqrt();
        let head_w = (0..classes * cfg.c_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        let head_b = (0..classes).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
        Ok(ClassifierBase { cfg: cfg.clone(), classes, bank, head_w, head_b })
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate(&self.cfg)?;
        if self.head_w.len() != self.classes * self.cfg.c_out {
            return Err(Error::DataLength {
                expected: self.classes * self.cfg.c_out,
                got: self.head_w.len(),
            });
        }
        if self.head_b.len() != self.classes {
            return Err(Error::DataLength { expected: self.classes, got: self.head_b.len() });
        }
        if !self.head_w.iter().chain(&self.head_b).all(|v| v.is_finite_value()) {
            return Err(Error::NonFinite { context: "head parameters" });
        }
        Ok(())
    }

    /// Number of buffers in the canonical parameter order.
    pub(crate) fn buffer_count(&self) -> usize {
        4 * self.bank.experts.len() + 6
    }

    pub(crate) fn buffer(&self, ord: usize) -> &[T] {
        let e = self.bank.experts.len();
        if ord < 4 * e {
            let expert = &self.bank.experts[ord / 4];
            match ord % 4 {
                0 => &expert.dw_kernel,
                1 => &expert.dw_bias,
                2 => &expert.pw_kernel,
                _ => &expert.pw_bias,
            }
        } else {
            match ord - 4 * e {
                0 => &self.bank.gate_w1,
                1 => &self.bank.gate_b1,
                2 => &self.bank.gate_w2,
                3 => &self.bank.gate_b2,
                4 => &self.head_w,
                _ => &self.head_b,
            }
        }
    }

    pub(crate) fn buffer_mut(&mut self, ord: usize) -> &mut Vec<T> {
        let e = self.bank.experts.len();
        if ord < 4 * e {
            let expert = &mut self.bank.experts[ord / 4];
            match ord % 4 {
                0 => &mut expert.dw_kernel,
                1 => &mut expert.dw_bias,
                2 => &mut expert.pw_kernel,
                _ => &mut expert.pw_bias,
            }
        } else {
            match ord - 4 * e {
                0 => &mut self.bank.gate_w1,
                1 => &mut self.bank.gate_b1,
                2 => &mut self.bank.gate_w2,
                3 => &mut self.bank.gate_b2,
                4 => &mut self.head_w,
                _ => &mut self.head_b,
            }
        }
    }

    pub(crate) fn buffer_name(&self, ord: usize) -> String {
        let e = self.bank.experts.len();
        if ord < 4 * e {
            let field = ["dw_kernel", "dw_bias", "pw_kernel", "pw_bias"][ord % 4];
            format!("expert{}.{}", ord / 4, field)
        } else {
            ["gate_w1", "gate_b1", "gate_w2", "gate_b2", "head_w", "head_b"][ord - 4 * e]
                .to_string()
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for ord in 0..self.buffer_count() {
            let len = self.buffer(ord).len();
            if idx < len {
                return (ord, idx);
            }
            idx -= len;
        }
        panic!("parameter index out of range");
    }

    /// Total scalar parameter count.
    pub fn param_len(&self) -> usize {
        (0..self.buffer_count()).map(|ord| self.buffer(ord).len()).sum()
    }

    pub fn param_get(&self, idx: usize) -> f64 {
        let (ord, off) = self.locate(idx);
        self.buffer(ord)[off].to_f64()
    }

    pub fn param_set(&mut self, idx: usize, value: f64) {
        let (ord, off) = self.locate(idx);
        self.buffer_mut(ord)[off] = T::from_f64(value);
    }

    /// Human-readable name of a flat parameter index, e.g. "expert1.pw_kernel[3]".
    pub fn param_name(&self, idx: usize) -> String {
        let (ord, off) = self.locate(idx);
        format!("{}[{}]", self.buffer_name(ord), off)
    }

    /// Forward pass to class logits under the given routing mode.
    pub fn forward_with_mode(
        &self,
        x: &TensorBase<T>,
        mode: RoutingMode,
    ) -> Result<(TensorBase<T>, RoutingOutcome)> {
        let run_cfg = self.cfg.with_mode(mode);
        let (features, routing) = esmoe_forward(x, &self.bank, &run_cfg)?;
        let pooled = gap(&features)?;
        let logits = pointwise1x1_forward(&pooled, &self.head_w, &self.head_b, self.classes)?;
        Ok((logits, routing))
    }

    /// Argmax class per sample; ties resolve to the lowest class index.
    pub fn predictions(&self, logits: &TensorBase<T>) -> Vec<usize> {
        let (n, classes, _, _) = logits.dims();
        (0..n)
            .map(|bn| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..classes {
                    let v = logits.at(bn, c, 0, 0);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// One training-mode forward/backward: total loss (task plus weighted
    /// load-balance term) and gradients for every parameter.
    pub fn step(
        &self,
        x: &TensorBase<T>,
        labels: &[usize],
        lb_weight: f64,
    ) -> Result<StepOutput<T>> {
        let run_cfg = self.cfg.with_mode(RoutingMode::Training);
        let cache = forward_cached(x, &self.bank, &run_cfg, false)?;
        let (_, _, h, w) = x.dims();

        let pooled = gap(&cache.output)?;
        let logits = pointwise1x1_forward(&pooled, &self.head_w, &self.head_b, self.classes)?;
        let (task, g_logits) = task_loss_softmax_ce(&logits, labels)?;
        let stats = utilization(&cache.routing)?;
        let lb = load_balance_loss(&stats.mu, self.cfg.experts)?;
        let breakdown = total_loss(task, lb, lb_weight)?;

        // Head backward, then pooling backward into the block.
        let (g_pooled, g_head_w, g_head_b) =
            pointwise1x1_backward(&pooled, &self.head_w, self.classes, &g_logits)?;
        let g_features = gap_backward(&g_pooled, h, w)?;

        // The load-balance loss reaches parameters through the routing
        // weights; its gradient joins the block backward there.
        let mut extra = lb_weights_grad(&cache.routing, &stats.mu)?;
        for g in extra.iter_mut() {
            *g *= lb_weight;
        }
        let (_, bank_grads) =
            backward_cached(x, &self.bank, &run_cfg, &cache, &g_features, Some(&extra))?;

        Ok(StepOutput {
            breakdown,
            grads: ModelGradients { bank: bank_grads, head_w: g_head_w, head_b: g_head_b },
            logits,
            routing: cache.routing,
        })
    }

    /// Loss and flattenable gradients; the finite-difference suite drives this.
    pub fn loss_and_grads(
        &self,
        x: &TensorBase<T>,
        labels: &[usize],
        lb_weight: f64,
    ) -> Result<(LossBreakdown, ModelGradients<T>)> {
        let out = self.step(x, labels, lb_weight)?;
        Ok((out.breakdown, out.grads))
    }
}

/// Full training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Weight on the load-balancing loss.
    pub lb_weight: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub dataset: DatasetSpec,
    pub block: EsMoeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.03,
            momentum: 0.9,
            lb_weight: 1.5,
            seed: 1,
            n_train: 1024,
            n_val: 128,
            dataset: DatasetSpec::default(),
            block: EsMoeConfig::new(4, 2, 3, 16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig { reason: "epochs must be at least 1".into() });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig { reason: "batch size must be at least 1".into() });
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("base learning rate {} must be nonnegative", self.base_lr),
            });
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig {
                reason: format!("momentum {} must lie in [0, 1)", self.momentum),
            });
        }
        if !self.lb_weight.is_finite() || self.lb_weight < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("load-balance weight {} must be nonnegative", self.lb_weight),
            });
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::InvalidConfig { reason: "train and val sets must be nonempty".into() });
        }
        self.dataset.validate()?;
        self.block.validate()?;
        if self.block.c_in != self.dataset.channels {
            return Err(Error::ConfigMismatch {
                reason: format!(
                    "block expects {} input channels, dataset provides {}",
                    self.block.c_in, self.dataset.channels
                ),
            });
        }
        Ok(())
    }
}

/// Result of an inference-mode evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Hard-routing utilization and entropy over the evaluated set.
    pub stats: UtilizationStats,
    /// Expert evaluations performed during this call; exactly
    /// top_k x samples when routing sparsely.
    pub expert_evals: u64,
}

/// Evaluate accuracy and routing statistics in hard top-k inference mode.
pub fn evaluate(
    model: &Classifier,
    samples: &[SynthSample],
    batch_size: usize,
) -> Result<EvalOutcome> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::InvalidConfig { reason: "nothing to evaluate".into() });
    }
    let experts = model.cfg.experts;
    let before = model.bank.expert_evals();
    let mut correct = 0usize;
    let mut mu = vec![0.0f64; experts];
    let mut entropy = 0.0f64;
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = batch_from_indices(samples, chunk)?;
        let (logits, routing) = model.forward_with_mode(&batch, RoutingMode::Inference)?;
        for (pred, label) in model.predictions(&logits).iter().zip(&labels) {
            if pred == label {
                correct += 1;
            }
        }
        for bn in 0..chunk.len() {
            let row = routing.weights_row(bn);
            let total: f64 = row.iter().sum();
            for i in 0..experts {
                mu[i] += row[i] / total;
            }
            entropy += entropy_bits(row)?;
        }
    }
    let n = samples.len() as f64;
    for m in mu.iter_mut() {
        *m /= n;
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / n,
        stats: UtilizationStats { mu, entropy_bits: entropy / n },
        expert_evals: model.bank.expert_evals() - before,
    })
}

/// Run the full training loop. Deterministic for a fixed configuration:
/// same data, same initialization, same shuffles, same arithmetic order.
pub fn train(cfg: &TrainConfig) -> Result<(Classifier, TrainReport)> {
    cfg.validate()?;
    let samples = generate(cfg.seed, cfg.n_train + cfg.n_val, &cfg.dataset)?;
    let (train_set, val_set) = samples.split_at(cfg.n_train);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_MODEL_INIT);
    let mut model = Classifier::init(&cfg.block, cfg.dataset.classes, &mut init_rng)?;

    let steps_per_epoch = (cfg.n_train + cfg.batch_size - 1) / cfg.batch_size;
    let schedule = CosineSchedule::new(cfg.base_lr, cfg.epochs * steps_per_epoch)?;
    let mut optimizer = Sgd::new(model.param_len(), cfg.momentum)?;

    let experts = cfg.block.experts;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..cfg.n_train).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(STREAM_SHUFFLE_BASE + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut task_acc = 0.0f64;
        let mut lb_acc = 0.0f64;
        let mut total_acc = 0.0f64;
        let mut correct = 0usize;
        let mut mu_acc = vec![0.0f64; experts];
        let mut entropy_acc = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = batch_from_indices(train_set, chunk)?;
            let out = match model.step(&batch, &labels, cfg.lb_weight) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            if !out.breakdown.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let weight = chunk.len() as f64;
            task_acc += out.breakdown.task_loss * weight;
            lb_acc += out.breakdown.lb_loss * weight;
            total_acc += out.breakdown.total * weight;
            for (pred, label) in model.predictions(&out.logits).iter().zip(&labels) {
                if pred == label {
                    correct += 1;
                }
            }
            for bn in 0..chunk.len() {
                let row = out.routing.weights_row(bn);
                let total: f64 = row.iter().sum();
                for i in 0..experts {
                    mu_acc[i] += row[i] / total;
                }
                entropy_acc += entropy_bits(row)?;
            }
            let lr = schedule.lr_at(global_step);
            let flat = out.grads.flatten();
            optimizer.step(&flat, lr, |idx, delta| {
                let cur = model.param_get(idx);
                model.param_set(idx, cur + delta);
            })?;
            global_step += 1;
        }

        let n = cfg.n_train as f64;
        let val = evaluate(&model, val_set, cfg.batch_size)?;
        epochs.push(EpochMetrics {
            epoch,
            task_loss: task_acc / n,
            lb_loss: lb_acc / n,
            total_loss: total_acc / n,
            train_acc: correct as f64 / n,
            val_acc: val.accuracy,
            mu: mu_acc.iter().map(|m| m / n).collect(),
            entropy_train_bits: entropy_acc / n,
            entropy_infer_bits: val.stats.entropy_bits,
        });
    }

    Ok((model, TrainReport { epochs, checkpoint: None }))
}
