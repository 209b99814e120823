//! SiLU activation and channel-wise softmax, with backward passes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise v * sigmoid(v).
pub fn silu<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    x.ensure_finite("silu input")?;
    Ok(x.map(|v| v * sigmoid(v)))
}

/// Backward of SiLU: d/dv [v * sigmoid(v)] = sigmoid(v) * (1 + v * (1 - sigmoid(v))).
pub fn silu_backward<T: Scalar>(
    x: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    if x.dims() != grad_out.dims() {
        return Err(Error::ShapeMismatch { expected: x.dims(), got: grad_out.dims() });
    }
    x.ensure_finite("silu input")?;
    grad_out.ensure_finite("silu output gradient")?;
    let (n, c, h, w) = x.dims();
    TensorBase::from_fn(n, c, h, w, |bn, bc, y, xx| {
        let v = x.at(bn, bc, y, xx);
        let s = sigmoid(v);
        grad_out.at(bn, bc, y, xx) * s * (1.0 + v * (1.0 - s))
    })
}

/// Softmax across the channel axis of an (N, E, 1, 1) tensor, computed with
/// the max subtracted for stability. Rows sum to 1.
pub fn softmax_over_channels<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (n, e, h, w) = x.dims();
    if h != 1 || w != 1 {
        return Err(Error::ShapeMismatch { expected: (n, e, 1, 1), got: x.dims() });
    }
    x.ensure_finite("softmax input")?;

    let mut out = TensorBase::zeros(n, e, 1, 1)?;
    for bn in 0..n {
        let mut max = f64::NEG_INFINITY;
        for bc in 0..e {
            max = max.max(x.at(bn, bc, 0, 0));
        }
        let mut denom = 0.0f64;
        let mut exps = vec![0.0f64; e];
        for bc in 0..e {
            let v = (x.at(bn, bc, 0, 0) - max).exp();
            exps[bc] = v;
            denom += v;
        }
        for bc in 0..e {
            out.set(bn, bc, 0, 0, exps[bc] / denom);
        }
    }
    out.ensure_finite("softmax output")?;
    Ok(out)
}

/// Backward of softmax given its own output `y`:
/// g_i = y_i * (grad_i - sum_j y_j * grad_j), row by row.
pub fn softmax_backward<T: Scalar>(
    y: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    if y.dims() != grad_out.dims() {
        return Err(Error::ShapeMismatch { expected: y.dims(), got: grad_out.dims() });
    }
    y.ensure_finite("softmax output")?;
    grad_out.ensure_finite("softmax output gradient")?;
    let (n, e, _, _) = y.dims();
    let mut out = TensorBase::zeros(n, e, 1, 1)?;
    for bn in 0..n {
        let mut dot = 0.0f64;
        for bc in 0..e {
            dot += y.at(bn, bc, 0, 0) * grad_out.at(bn, bc, 0, 0);
        }
        for bc in 0..e {
            let v = y.at(bn, bc, 0, 0) * (grad_out.at(bn, bc, 0, 0) - dot);
            out.set(bn, bc, 0, 0, v);
        }
    }
    Ok(out)
}
