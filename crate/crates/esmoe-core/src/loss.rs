//! Losses and routing statistics.
//!
//! The load-balancing loss is the mean squared deviation of per-expert
//! utilization from the uniform target 1/E; it is what keeps the router from
//! collapsing onto a few experts. A mean cross-entropy over class logits
//! stands in as the task loss, and `total_loss` combines the two. Routing
//! entropy (bits) quantifies how decisive the router is.

use crate::block::RoutingOutcome;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

/// Per-expert utilization and routing decisiveness over a batch.
#[derive(Clone, Debug)]
pub struct UtilizationStats {
    /// Mean normalized routing mass per expert; sums to 1.
    pub mu: Vec<f64>,
    /// Mean per-sample Shannon entropy of the routing weights, base 2.
    pub entropy_bits: f64,
}

/// Scalar loss components and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub lb_loss: f64,
    /// Weight on the load-balancing term.
    pub lb_weight: f64,
    /// task_loss + lb_weight * lb_loss, exact in f64.
    pub total: f64,
}

/// Shannon entropy in bits of one weight vector, with 0 * log 0 := 0.
pub fn entropy_bits(weights: &[f64]) -> Result<f64> {
    let mut h = 0.0f64;
    for &w in weights {
        if w < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("negative routing weight {}", w),
            });
        }
        if w > 0.0 {
            h -= w * w.log2();
        }
    }
    Ok(h)
}

/// Mean per-sample routing entropy in bits over a routed batch.
pub fn routing_entropy(routing: &RoutingOutcome) -> Result<f64> {
    let n = routing.samples();
    let mut acc = 0.0f64;
    for bn in 0..n {
        acc += entropy_bits(routing.weights_row(bn))?;
    }
    Ok(acc / n as f64)
}

/// Mean per-expert utilization of a routed batch:
/// mu_i = mean over samples of w_i / sum_j w_j.
pub fn utilization(routing: &RoutingOutcome) -> Result<UtilizationStats> {
    let n = routing.samples();
    let e = routing.experts();
    if n == 0 {
        return Err(Error::InvalidConfig { reason: "empty batch has no utilization".into() });
    }
    let mut mu = vec![0.0f64; e];
    for bn in 0..n {
        let row = routing.weights_row(bn);
        let total: f64 = row.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFinite { context: "routing weight row sum" });
        }
        for i in 0..e {
            mu[i] += row[i] / total;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let entropy = routing_entropy(routing)?;
    Ok(UtilizationStats { mu, entropy_bits: entropy })
}

/// Load-balancing loss: (1/E) * sum_i (mu_i - 1/E)^2.
pub fn load_balance_loss(mu: &[f64], experts: usize) -> Result<f64> {
    if mu.len() != experts {
        return Err(Error::DataLength { expected: experts, got: mu.len() });
    }
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "utilization vector" });
    }
    let target = 1.0 / experts as f64;
    let sum: f64 = mu.iter().map(|m| (m - target) * (m - target)).sum();
    Ok(sum / experts as f64)
}

/// Gradient of the load-balancing loss: dL/dmu_i = (2/E)(mu_i - 1/E).
pub fn load_balance_grad(mu: &[f64], experts: usize) -> Result<Vec<f64>> {
    if mu.len() != experts {
        return Err(Error::DataLength { expected: experts, got: mu.len() });
    }
    let target = 1.0 / experts as f64;
    let scale = 2.0 / experts as f64;
    Ok(mu.iter().map(|m| scale * (m - target)).collect())
}

/// Gradient of the load-balancing loss with respect to every routing weight
/// in the batch, flattened (samples x experts). Chains dL/dmu through the
/// per-sample normalization mu_i = mean_n(w_i / sum_j w_j).
pub fn lb_weights_grad(routing: &RoutingOutcome, mu: &[f64]) -> Result<Vec<f64>> {
    let n = routing.samples();
    let e = routing.experts();
    let g_mu = load_balance_grad(mu, e)?;
    let mut out = vec![0.0f64; n * e];
    let inv_n = 1.0 / n as f64;
    for bn in 0..n {
        let row = routing.weights_row(bn);
        let total: f64 = row.iter().sum();
        let dot: f64 = g_mu.iter().zip(row).map(|(g, w)| g * w).sum();
        for i in 0..e {
            out[bn * e + i] = inv_n * (g_mu[i] / total - dot / (total * total));
        }
    }
    Ok(out)
}

/// Weighted total: task + lb_weight * lb.
pub fn total_loss(task: f64, lb: f64, lb_weight: f64) -> Result<LossBreakdown> {
    if !task.is_finite() || !lb.is_finite() || !lb_weight.is_finite() {
        return Err(Error::NonFinite { context: "loss components" });
    }
    if lb_weight < 0.0 {
        return Err(Error::InvalidConfig {
            reason: format!("load-balance weight {} must be nonnegative", lb_weight),
        });
    }
    Ok(LossBreakdown { task_loss: task, lb_loss: lb, lb_weight, total: task + lb_weight * lb })
}

/// Mean softmax cross-entropy over class logits shaped (N, classes, 1, 1),
/// with its gradient (softmax - onehot) / N in the same shape.
pub fn task_loss_softmax_ce<T: Scalar>(
    logits: &TensorBase<T>,
    labels: &[usize],
) -> Result<(f64, TensorBase<T>)> {
    let (n, classes, h, w) = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::ShapeMismatch { expected: (n, classes, 1, 1), got: logits.dims() });
    }
    if labels.len() != n {
        return Err(Error::DataLength { expected: n, got: labels.len() });
    }
    logits.ensure_finite("class logits")?;
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }
    let mut grad = TensorBase::zeros(n, classes, 1, 1)?;
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for bn in 0..n {
        let row: Vec<f64> = (0..classes).map(|c| logits.at(bn, c, 0, 0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let label = labels[bn];
        loss -= ((exps[label] / denom).ln()) * inv_n;
        for c in 0..classes {
            let p = exps[c] / denom;
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.set(bn, c, 0, 0, (p - onehot) * inv_n);
        }
    }
    Ok((loss, grad))
}
