//! Finite-difference gradient verification.
//!
//! Every analytic backward pass in this crate is checked against central
//! differences at f64. The helpers here define the shared error metric and
//! drive the full-model suite over every parameter of a classifier
//! (experts, gating network, and linear head), including the utilization
//! path of the load-balancing loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{gate_logits, EsMoeConfig};
use crate::error::Result;
use crate::tensor::TensorBase;
use crate::train::ClassifierBase;

/// Central-difference step. Chosen for f64: truncation error O(h^2) ~ 1e-8
/// and cancellation error ~ machine-eps/h ~ 1e-12 both sit far below the
/// 1e-3 acceptance threshold.
pub const FD_STEP: f64 = 1e-4;

/// Acceptance threshold on the worst relative error.
pub const REL_ERR_LIMIT: f64 = 1e-3;

/// Relative error with the denominator floored at 1e-3, so near-zero
/// gradient pairs compare by absolute difference instead of blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Summary of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of scalar parameters checked.
    pub checks: usize,
    pub worst_rel_err: f64,
    /// Name of the parameter slot with the worst error, e.g. "expert2.dw_kernel[14]".
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < REL_ERR_LIMIT
    }
}

/// Draw a model and batch whose gate logits keep pairwise gaps above 1e-2
/// for every sample, so the top-k selection is stable under perturbation
/// and central differences see a smooth function.
fn gapped_model(
    seed: u64,
    cfg: &EsMoeConfig,
    classes: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Result<(ClassifierBase<f64>, TensorBase<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut model = ClassifierBase::<f64>::init(cfg, classes, &mut rng)?;
        // Replace the shared-function training init with fully independent
        // expert parameters: the suite should check generic geometry, not
        // the degenerate identical-expert point.
        model.bank = crate::block::ExpertBankBase::<f64>::init(cfg, &mut rng)?;
        let x = TensorBase::<f64>::random_uniform(n, cfg.c_in, h, w, -1.0, 1.0, &mut rng)?;
        let logits = gate_logits(&x, &model.bank, cfg)?;
        let stable = logits.chunks(cfg.experts).all(|row| {
            (0..row.len()).all(|i| {
                ((i + 1)..row.len()).all(|j| (row[i] - row[j]).abs() > 1e-2)
            })
        });
        if stable {
            let labels = (0..n).map(|i| i % classes).collect();
            return Ok((model, x, labels));
        }
    }
}

/// Run the full finite-difference suite over every parameter of a small
/// classifier: expert depthwise/pointwise kernels and biases, both gating
/// layers, and the linear head. The loss is the total training loss, so the
/// load-balancing term's gradient path through the routing probabilities is
/// exercised too.
pub fn run_gradcheck(seed: u64, lb_weight: f64) -> Result<GradCheckReport> {
    let cfg = EsMoeConfig::new(4, 2, 8, 8);
    let classes = 4;
    let (model, x, labels) = gapped_model(seed, &cfg, classes, 4, 16, 16)?;

    let (_, grads) = model.loss_and_grads(&x, &labels, lb_weight)?;
    let analytic = grads.flatten();

    let mut worst = 0.0f64;
    let mut worst_param = String::from("none");
    let mut checks = 0usize;
    let mut probe = model.clone();
    let total = probe.param_len();
    for idx in 0..total {
        let orig = probe.param_get(idx);
        probe.param_set(idx, orig + FD_STEP);
        let (up, _) = probe.loss_and_grads(&x, &labels, lb_weight)?;
        probe.param_set(idx, orig - FD_STEP);
        let (down, _) = probe.loss_and_grads(&x, &labels, lb_weight)?;
        probe.param_set(idx, orig);
        let fd = (up.total - down.total) / (2.0 * FD_STEP);
        let err = relative_error(analytic[idx], fd);
        if err > worst {
            worst = err;
            worst_param = model.param_name(idx);
        }
        checks += 1;
    }

    Ok(GradCheckReport { checks, worst_rel_err: worst, worst_param })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_the_denominator() {
        // Both tiny: compared absolutely against the 1e-3 floor.
        assert!(relative_error(1e-9, -1e-9) < 1e-5);
        // Exact agreement is zero.
        assert_eq!(relative_error(0.5, 0.5), 0.0);
        // Large disagreement registers near 1.
        assert!((relative_error(1.0, 2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn full_model_suite_passes() {
        let report = run_gradcheck(11, 1.5).unwrap();
        assert!(report.checks > 500, "suite covered {} parameters", report.checks);
        assert!(
            report.passed(),
            "worst relative error {} at {}",
            report.worst_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn suite_also_passes_without_balance_term() {
        let report = run_gradcheck(12, 0.0).unwrap();
        assert!(report.passed(), "worst {} at {}", report.worst_rel_err, report.worst_param);
    }
}
