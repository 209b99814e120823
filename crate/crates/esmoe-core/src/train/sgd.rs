//! Momentum SGD and the cosine learning-rate schedule.

use crate::error::{Error, Result};

/// Cosine decay from `base_lr` at step 0 toward 0 at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        if !base_lr.is_finite() || base_lr < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("base learning rate {} must be nonnegative", base_lr),
            });
        }
        if total_steps == 0 {
            return Err(Error::InvalidConfig { reason: "schedule needs at least one step".into() });
        }
        Ok(CosineSchedule { base_lr, total_steps })
    }

    /// Learning rate for the given 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Plain momentum SGD over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<f64>,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(param_len: usize, momentum: f64) -> Result<Self> {
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig {
                reason: format!("momentum {} must lie in [0, 1)", momentum),
            });
        }
        Ok(Sgd { velocity: vec![0.0; param_len], momentum })
    }

    /// One update: v <- momentum * v - lr * g, then each parameter += v.
    /// `apply` receives (flat index, delta) for every parameter.
    pub fn step(
        &mut self,
        grads: &[f64],
        lr: f64,
        mut apply: impl FnMut(usize, f64),
    ) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::DataLength { expected: self.velocity.len(), got: grads.len() });
        }
        for (idx, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite { context: "parameter gradient" });
            }
            let v = self.momentum * self.velocity[idx] - lr * g;
            self.velocity[idx] = v;
            apply(idx, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_spans_base_lr_down_to_zero() {
        let s = CosineSchedule::new(0.1, 100).unwrap();
        assert!((s.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(50) - 0.05).abs() < 1e-12);
        assert!(s.lr_at(100).abs() < 1e-15);
        // Monotone nonincreasing across the run.
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = s.lr_at(t);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn momentum_accumulates_past_gradients() {
        let mut opt = Sgd::new(1, 0.9).unwrap();
        let mut w = 0.0f64;
        opt.step(&[1.0], 0.1, |_, d| w += d).unwrap();
        assert!((w - -0.1).abs() < 1e-15);
        // Second step: v = 0.9 * (-0.1) - 0.1 = -0.19.
        opt.step(&[1.0], 0.1, |_, d| w += d).unwrap();
        assert!((w - -0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_with_zero_velocity_changes_nothing() {
        let mut opt = Sgd::new(3, 0.9).unwrap();
        let mut touched = Vec::new();
        opt.step(&[1.0, -2.0, 3.0], 0.0, |i, d| {
            assert_eq!(d, 0.0);
            touched.push(i);
        })
        .unwrap();
        assert_eq!(touched, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_mismatched_gradient_length_and_bad_momentum() {
        let mut opt = Sgd::new(2, 0.9).unwrap();
        assert!(opt.step(&[1.0], 0.1, |_, _| {}).is_err());
        assert!(Sgd::new(2, 1.0).is_err());
        assert!(Sgd::new(2, -0.1).is_err());
        assert!(CosineSchedule::new(-1.0, 10).is_err());
    }
}
