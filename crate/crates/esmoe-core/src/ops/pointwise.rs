//! Standalone 1x1 convolution. On (N, C, 1, 1) inputs this is a dense layer,
//! which is exactly how the gating network uses it.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

/// Forward pass. `weight` is laid out (c_out, c_in); `bias` has length c_out.
pub fn pointwise1x1_forward<T: Scalar>(
    x: &TensorBase<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
) -> Result<TensorBase<T>> {
    let (n, c, h, w) = x.dims();
    check_params(c, c_out, weight, bias)?;
    x.ensure_finite("pointwise input")?;

    let mut out = TensorBase::zeros(n, c_out, h, w)?;
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for oc in 0..c_out {
                    let mut acc = bias[oc].to_f64();
                    for bc in 0..c {
                        acc += x.at(bn, bc, y, xx) * weight[oc * c + bc].to_f64();
                    }
                    out.set(bn, oc, y, xx, acc);
                }
            }
        }
    }
    out.ensure_finite("pointwise output")?;
    Ok(out)
}

/// Backward pass. Returns (grad_x, grad_weight, grad_bias).
pub fn pointwise1x1_backward<T: Scalar>(
    x: &TensorBase<T>,
    weight: &[T],
    c_out: usize,
    grad_out: &TensorBase<T>,
) -> Result<(TensorBase<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims();
    if weight.len() != c_out * c {
        return Err(Error::DataLength { expected: c_out * c, got: weight.len() });
    }
    let expected = (n, c_out, h, w);
    if grad_out.dims() != expected {
        return Err(Error::ShapeMismatch { expected, got: grad_out.dims() });
    }
    grad_out.ensure_finite("pointwise output gradient")?;

    let mut g_w = vec![0.0f64; c_out * c];
    let mut g_b = vec![0.0f64; c_out];
    let mut grad_x = TensorBase::zeros(n, c, h, w)?;
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for oc in 0..c_out {
                    let go = grad_out.at(bn, oc, y, xx);
                    g_b[oc] += go;
                    for bc in 0..c {
                        g_w[oc * c + bc] += go * x.at(bn, bc, y, xx);
                        let cur = grad_x.at(bn, bc, y, xx);
                        grad_x.set(bn, bc, y, xx, cur + go * weight[oc * c + bc].to_f64());
                    }
                }
            }
        }
    }
    Ok((
        grad_x,
        g_w.into_iter().map(T::from_f64).collect(),
        g_b.into_iter().map(T::from_f64).collect(),
    ))
}

fn check_params<T: Scalar>(c_in: usize, c_out: usize, weight: &[T], bias: &[T]) -> Result<()> {
    if c_out == 0 {
        return Err(Error::InvalidConfig { reason: "pointwise c_out must be nonzero".into() });
    }
    if weight.len() != c_out * c_in {
        return Err(Error::DataLength { expected: c_out * c_in, got: weight.len() });
    }
    if bias.len() != c_out {
        return Err(Error::DataLength { expected: c_out, got: bias.len() });
    }
    if !weight.iter().chain(bias).all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite { context: "pointwise parameters" });
    }
    Ok(())
}
