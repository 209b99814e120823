//! Global average pooling over the spatial extent.

use crate::error::Result;
use crate::tensor::{Scalar, TensorBase};

/// Reduces (N, C, H, W) to (N, C, 1, 1) by the spatial mean, accumulated in f64.
pub fn gap<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    x.ensure_finite("gap input")?;
    let (n, c, h, w) = x.dims();
    let norm = 1.0 / (h * w) as f64;
    let mut out = TensorBase::zeros(n, c, 1, 1)?;
    for bn in 0..n {
        for bc in 0..c {
            let mut acc = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(bn, bc, y, xx);
                }
            }
            out.set(bn, bc, 0, 0, acc * norm);
        }
    }
    out.ensure_finite("gap output")?;
    Ok(out)
}

/// Backward pass: the incoming (N, C, 1, 1) gradient spreads uniformly over
/// the spatial positions, scaled by 1/(H*W).
pub fn gap_backward<T: Scalar>(
    grad_out: &TensorBase<T>,
    h: usize,
    w: usize,
) -> Result<TensorBase<T>> {
    grad_out.ensure_finite("gap output gradient")?;
    let (n, c, gh, gw) = grad_out.dims();
    if gh != 1 || gw != 1 {
        return Err(crate::error::Error::ShapeMismatch {
            expected: (n, c, 1, 1),
            got: grad_out.dims(),
        });
    }
    let norm = 1.0 / (h * w) as f64;
    TensorBase::from_fn(n, c, h, w, |bn, bc, _, _| grad_out.at(bn, bc, 0, 0) * norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::from_fn(2, 3, 4, 5, |_, _, _, _| 3.5).unwrap();
        let y = gap(&x).unwrap();
        assert_eq!(y.dims(), (2, 3, 1, 1));
        for v in y.data() {
            assert!((v - 3.5).abs() < 1e-6);
        }
    }

    #[test]
    fn small_example_mean() {
        let x = Tensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = gap(&x).unwrap();
        assert!((y.at(0, 0, 0, 0) - 2.5).abs() < 1e-7);
    }

    #[test]
    fn matches_naive_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::random_uniform(2, 8, 5, 7, -1.0, 1.0, &mut rng).unwrap();
        let y = gap(&x).unwrap();
        let (n, c, h, w) = x.dims();
        for bn in 0..n {
            for bc in 0..c {
                let mut acc = 0.0f64;
                for yy in 0..h {
                    for xx in 0..w {
                        acc += x.at(bn, bc, yy, xx);
                    }
                }
                let want = acc / (h * w) as f64;
                assert!((y.at(bn, bc, 0, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pool_then_broadcast_of_zero_mean_input_is_zero() {
        // For an input with exact zero channel means, gap produces zeros and
        // the broadcast of those zeros back over space stays zero.
        let x = Tensor::from_fn(1, 2, 2, 2, |_, c, y, xx| {
            let sign = if (y + xx) % 2 == 0 { 1.0 } else { -1.0 };
            sign * (c as f64 + 1.0)
        })
        .unwrap();
        let pooled = gap(&x).unwrap();
        for v in pooled.data() {
            assert!(v.abs() < 1e-7);
        }
        let back = gap_backward(&pooled, 2, 2).unwrap();
        for v in back.data() {
            assert!(v.abs() < 1e-7);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = TensorBase::<f64>::random_uniform(2, 3, 3, 4, -1.0, 1.0, &mut rng).unwrap();
        let r = TensorBase::<f64>::random_uniform(2, 3, 1, 1, -1.0, 1.0, &mut rng).unwrap();
        let loss = |x: &TensorBase<f64>| -> f64 {
            let y = gap(x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let gx = gap_backward(&r, 3, 4).unwrap();
        let h = 1e-4;
        let mut xp = x.clone();
        let mut worst = 0.0f64;
        for i in 0..xp.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let up = loss(&xp);
            xp.data_mut()[i] = orig - h;
            let down = loss(&xp);
            xp.data_mut()[i] = orig;
            worst = worst.max(relative_error(gx.data()[i], (up - down) / (2.0 * h)));
        }
        assert!(worst < 1e-3, "worst relative error {}", worst);
    }
}
