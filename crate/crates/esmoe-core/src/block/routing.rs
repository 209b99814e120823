//! Phased top-k routing over gate logits.
//!
//! Training mode masks the full softmax to the selected experts and
//! renormalizes, keeping the selection differentiable through the retained
//! probabilities. Inference mode softmaxes the selected logits only, which is
//! algebraically the same weighting, so the two phases agree numerically.

use crate::block::{EsMoeConfig, RoutingMode};
use crate::error::{Error, Result};

/// Routing decision for a batch: one row per sample across all experts.
#[derive(Clone, Debug)]
pub struct RoutingOutcome {
    samples: usize,
    experts: usize,
    k: usize,
    /// Raw gate outputs, row-major (samples x experts).
    pub logits: Vec<f64>,
    /// Full softmax of each logit row.
    pub probs: Vec<f64>,
    /// Selection mask; exactly k true entries per row.
    pub mask: Vec<bool>,
    /// Selected expert indices per sample, ascending. Length samples * k.
    pub selected: Vec<usize>,
    /// Mixture weights actually applied. Exactly k nonzeros per row, and
    /// each row sums to 1 up to the renormalization guard.
    pub weights: Vec<f64>,
}

impl RoutingOutcome {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn logits_row(&self, n: usize) -> &[f64] {
        &self.logits[n * self.experts..(n + 1) * self.experts]
    }

    pub fn probs_row(&self, n: usize) -> &[f64] {
        &self.probs[n * self.experts..(n + 1) * self.experts]
    }

    pub fn weights_row(&self, n: usize) -> &[f64] {
        &self.weights[n * self.experts..(n + 1) * self.experts]
    }

    pub fn mask_row(&self, n: usize) -> &[bool] {
        &self.mask[n * self.experts..(n + 1) * self.experts]
    }

    pub fn selected_row(&self, n: usize) -> &[usize] {
        &self.selected[n * self.k..(n + 1) * self.k]
    }

    /// Expert with the largest applied weight for a sample; ties resolve to
    /// the lowest index.
    pub fn primary_expert(&self, n: usize) -> usize {
        let row = self.weights_row(n);
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Routes a batch of logit rows according to the configured mode.
pub fn route(logits: &[f64], samples: usize, cfg: &EsMoeConfig) -> Result<RoutingOutcome> {
    cfg.validate()?;
    let e = cfg.experts;
    let k = cfg.top_k;
    if samples == 0 {
        return Err(Error::InvalidConfig { reason: "routing needs at least one sample".into() });
    }
    if logits.len() != samples * e {
        return Err(Error::DataLength { expected: samples * e, got: logits.len() });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "routing logits" });
    }

    let mut probs = vec![0.0f64; samples * e];
    let mut mask = vec![false; samples * e];
    let mut selected = Vec::with_capacity(samples * k);
    let mut weights = vec![0.0f64; samples * e];

    for n in 0..samples {
        let row = &logits[n * e..(n + 1) * e];
        let p = softmax_row(row);
        probs[n * e..(n + 1) * e].copy_from_slice(&p);

        let sel = topk_indices(row, k);
        for &i in &sel {
            mask[n * e + i] = true;
        }

        match cfg.mode {
            RoutingMode::Training => {
                let retained: f64 = sel.iter().map(|&i| p[i]).sum();
                let denom = retained + cfg.renorm_epsilon;
                for &i in &sel {
                    weights[n * e + i] = p[i] / denom;
                }
            }
            RoutingMode::Inference => {
                let max = sel.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                let mut exps = vec![0.0f64; sel.len()];
                for (j, &i) in sel.iter().enumerate() {
                    let v = (row[i] - max).exp();
                    exps[j] = v;
                    denom += v;
                }
                for (j, &i) in sel.iter().enumerate() {
                    weights[n * e + i] = exps[j] / denom;
                }
            }
        }
        selected.extend_from_slice(&sel);
    }

    Ok(RoutingOutcome { samples, experts: e, k, logits: logits.to_vec(), probs, mask, selected, weights })
}

/// Indices of the k largest entries, ties broken toward the lower index.
/// The result is sorted ascending.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).expect("finite logits").then(a.cmp(&b))
    });
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / denom).collect()
}

/// Backward of the masked renormalization. `g_weights` holds gradients with
/// respect to the applied weights; the result is the gradient with respect to
/// the full softmax probabilities.
pub(crate) fn soft_topk_backward(
    probs: &[f64],
    selected: &[usize],
    g_weights: &[f64],
    eps: f64,
) -> Vec<f64> {
    let retained: f64 = selected.iter().map(|&i| probs[i]).sum();
    let denom = retained + eps;
    let dot: f64 = selected.iter().map(|&i| g_weights[i] * probs[i]).sum();
    let mut g = vec![0.0f64; probs.len()];
    for &i in selected {
        g[i] = g_weights[i] / denom - dot / (denom * denom);
    }
    g
}

/// Backward of a softmax row given its output probabilities.
pub(crate) fn softmax_row_backward(probs: &[f64], g_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(g_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(g_probs).map(|(p, g)| p * (g - dot)).collect()
}
