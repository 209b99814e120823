//! Depthwise-separable convolution: a per-channel k x k stage followed by a
//! 1x1 channel-mixing stage. Stride 1, same padding, bias in both stages,
//! and no activation between the stages.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

/// Parameters of one depthwise-separable convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParamsBase<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial kernel size of the depthwise stage. Must be odd.
    pub kernel: usize,
    /// Depthwise taps, laid out (c_in, k, k).
    pub dw_kernel: Vec<T>,
    /// Depthwise bias, one per input channel.
    pub dw_bias: Vec<T>,
    /// Pointwise mixing matrix, laid out (c_out, c_in).
    pub pw_kernel: Vec<T>,
    /// Pointwise bias, one per output channel.
    pub pw_bias: Vec<T>,
}

pub type ConvParams = ConvParamsBase<f32>;

impl<T: Scalar> ConvParamsBase<T> {
    /// All-zero parameters of the given shape.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::check_shape(c_in, c_out, kernel)?;
        let zero = T::from_f64(0.0);
        Ok(ConvParamsBase {
            c_in,
            c_out,
            kernel,
            dw_kernel: vec![zero; c_in * kernel * kernel],
            dw_bias: vec![zero; c_in],
            pw_kernel: vec![zero; c_out * c_in],
            pw_bias: vec![zero; c_out],
        })
    }

    /// Wraps existing buffers, validating shapes and finiteness.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dw_kernel: Vec<T>,
        dw_bias: Vec<T>,
        pw_kernel: Vec<T>,
        pw_bias: Vec<T>,
    ) -> Result<Self> {
        Self::check_shape(c_in, c_out, kernel)?;
        let p = ConvParamsBase { c_in, c_out, kernel, dw_kernel, dw_bias, pw_kernel, pw_bias };
        p.validate()?;
        Ok(p)
    }

    /// Uniform initialization in +-sqrt(1/fan_in) per layer. The depthwise
    /// stage sees k*k inputs per channel; the pointwise stage sees c_in.
    pub fn init<R: Rng>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(c_in, c_out, kernel)?;
        let dw_bound = (1.0 / (kernel * kernel) as f64).sqrt();
        for v in p.dw_kernel.iter_mut().chain(p.dw_bias.iter_mut()) {
            *v = T::from_f64(rng.gen_range(-dw_bound..=dw_bound));
        }
        let pw_bound = (1.0 / c_in as f64).sqrt();
        for v in p.pw_kernel.iter_mut().chain(p.pw_bias.iter_mut()) {
            *v = T::from_f64(rng.gen_range(-pw_bound..=pw_bound));
        }
        Ok(p)
    }

    fn check_shape(c_in: usize, c_out: usize, kernel: usize) -> Result<()> {
        if c_in == 0 || c_out == 0 || kernel == 0 {
            return Err(Error::InvalidConfig {
                reason: format!("conv shape {}x{} k={} has a zero term", c_in, c_out, kernel),
            });
        }
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel { size: kernel });
        }
        Ok(())
    }

    /// Structural validation of buffer lengths and finiteness.
    pub fn validate(&self) -> Result<()> {
        Self::check_shape(self.c_in, self.c_out, self.kernel)?;
        let k = self.kernel;
        let checks = [
            (self.dw_kernel.len(), self.c_in * k * k),
            (self.dw_bias.len(), self.c_in),
            (self.pw_kernel.len(), self.c_out * self.c_in),
            (self.pw_bias.len(), self.c_out),
        ];
        for (got, expected) in checks {
            if got != expected {
                return Err(Error::DataLength { expected, got });
            }
        }
        let finite = self
            .dw_kernel
            .iter()
            .chain(&self.dw_bias)
            .chain(&self.pw_kernel)
            .chain(&self.pw_bias)
            .all(|v| v.is_finite_value());
        if !finite {
            return Err(Error::NonFinite { context: "conv parameters" });
        }
        Ok(())
    }

    /// Closed-form parameter count: c_in*k*k + c_in + c_in*c_out + c_out.
    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_in * kernel * kernel + c_in + c_in * c_out + c_out
    }

    /// Parameter count by enumerating the stored buffers. Used to cross-check
    /// the closed form.
    pub fn stored_param_count(&self) -> usize {
        self.dw_kernel.len() + self.dw_bias.len() + self.pw_kernel.len() + self.pw_bias.len()
    }
}

/// Forward pass. Input (N, c_in, H, W) produces (N, c_out, H, W).
pub fn dwconv_forward<T: Scalar>(x: &TensorBase<T>, p: &ConvParamsBase<T>) -> Result<TensorBase<T>> {
    p.validate()?;
    if x.channels() != p.c_in {
        return Err(Error::ChannelMismatch { expected: p.c_in, got: x.channels() });
    }
    x.ensure_finite("dwconv input")?;

    let (n, c, h, w) = x.dims();
    let k = p.kernel;
    let pad = (k - 1) / 2;
    let mut out = TensorBase::zeros(n, p.c_out, h, w)?;
    // Depthwise results for one spatial position, reused across the batch.
    let mut mid = vec![0.0f64; c];

    for bn in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                for bc in 0..c {
                    let mut acc = p.dw_bias[bc].to_f64();
                    for dy in 0..k {
                        let sy = oy + dy;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        for dx in 0..k {
                            let sx = ox + dx;
                            if sx < pad || sx - pad >= w {
                                continue;
                            }
                            let sx = sx - pad;
                            acc += x.at(bn, bc, sy, sx) * p.dw_kernel[(bc * k + dy) * k + dx].to_f64();
                        }
                    }
                    mid[bc] = acc;
                }
                for oc in 0..p.c_out {
                    let mut acc = p.pw_bias[oc].to_f64();
                    for bc in 0..c {
                        acc += mid[bc] * p.pw_kernel[oc * c + bc].to_f64();
                    }
                    out.set(bn, oc, oy, ox, acc);
                }
            }
        }
    }
    out.ensure_finite("dwconv output")?;
    Ok(out)
}

/// Backward pass. Returns the gradient with respect to the input and a
/// parameter-shaped gradient. Accumulation happens in `f64` buffers and is
/// converted to storage precision once at the end.
pub fn dwconv_backward<T: Scalar>(
    x: &TensorBase<T>,
    p: &ConvParamsBase<T>,
    grad_out: &TensorBase<T>,
) -> Result<(TensorBase<T>, ConvParamsBase<T>)> {
    p.validate()?;
    if x.channels() != p.c_in {
        return Err(Error::ChannelMismatch { expected: p.c_in, got: x.channels() });
    }
    let (n, c, h, w) = x.dims();
    let expected = (n, p.c_out, h, w);
    if grad_out.dims() != expected {
        return Err(Error::ShapeMismatch { expected, got: grad_out.dims() });
    }
    x.ensure_finite("dwconv input")?;
    grad_out.ensure_finite("dwconv output gradient")?;

    let k = p.kernel;
    let pad = (k - 1) / 2;
    let plane = h * w;
    let idx = |bn: usize, bc: usize, y: usize, xx: usize| ((bn * c + bc) * h + y) * w + xx;

    // Recompute the depthwise stage; the pointwise parameter gradient needs it.
    let mut mid = vec![0.0f64; n * c * plane];
    for bn in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                for bc in 0..c {
                    let mut acc = p.dw_bias[bc].to_f64();
                    for dy in 0..k {
                        let sy = oy + dy;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        for dx in 0..k {
                            let sx = ox + dx;
                            if sx < pad || sx - pad >= w {
                                continue;
                            }
                            let sx = sx - pad;
                            acc += x.at(bn, bc, sy, sx) * p.dw_kernel[(bc * k + dy) * k + dx].to_f64();
                        }
                    }
                    mid[idx(bn, bc, oy, ox)] = acc;
                }
            }
        }
    }

    // Pointwise stage gradients, plus the gradient flowing into the depthwise
    // stage output.
    let mut g_pw_kernel = vec![0.0f64; p.c_out * c];
    let mut g_pw_bias = vec![0.0f64; p.c_out];
    let mut g_mid = vec![0.0f64; n * c * plane];
    for bn in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                for oc in 0..p.c_out {
                    let go = grad_out.at(bn, oc, oy, ox);
                    g_pw_bias[oc] += go;
                    for bc in 0..c {
                        let m = mid[idx(bn, bc, oy, ox)];
                        g_pw_kernel[oc * c + bc] += go * m;
                        g_mid[idx(bn, bc, oy, ox)] += go * p.pw_kernel[oc * c + bc].to_f64();
                    }
                }
            }
        }
    }

    // Depthwise stage gradients and the input gradient.
    let mut g_dw_kernel = vec![0.0f64; c * k * k];
    let mut g_dw_bias = vec![0.0f64; c];
    let mut g_x = vec![0.0f64; n * c * plane];
    for bn in 0..n {
        for bc in 0..c {
            for oy in 0..h {
                for ox in 0..w {
                    let gm = g_mid[idx(bn, bc, oy, ox)];
                    g_dw_bias[bc] += gm;
                    for dy in 0..k {
                        let sy = oy + dy;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        for dx in 0..k {
                            let sx = ox + dx;
                            if sx < pad || sx - pad >= w {
                                continue;
                            }
                            let sx = sx - pad;
                            g_dw_kernel[(bc * k + dy) * k + dx] += gm * x.at(bn, bc, sy, sx);
                            g_x[idx(bn, bc, sy, sx)] += gm * p.dw_kernel[(bc * k + dy) * k + dx].to_f64();
                        }
                    }
                }
            }
        }
    }

    let mut grad_x = TensorBase::zeros(n, c, h, w)?;
    for bn in 0..n {
        for bc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    grad_x.set(bn, bc, y, xx, g_x[idx(bn, bc, y, xx)]);
                }
            }
        }
    }
    let grad_p = ConvParamsBase {
        c_in: c,
        c_out: p.c_out,
        kernel: k,
        dw_kernel: g_dw_kernel.into_iter().map(T::from_f64).collect(),
        dw_bias: g_dw_bias.into_iter().map(T::from_f64).collect(),
        pw_kernel: g_pw_kernel.into_iter().map(T::from_f64).collect(),
        pw_bias: g_pw_bias.into_iter().map(T::from_f64).collect(),
    };
    grad_x.ensure_finite("dwconv input gradient")?;
    grad_p.validate()?;
    Ok((grad_x, grad_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct oracle: materialize a zero-padded copy of each channel, run the
    /// depthwise stage over it with plain loops, then mix channels.
    fn reference_dwconv(x: &TensorBase<f64>, p: &ConvParamsBase<f64>) -> TensorBase<f64> {
        let (n, c, h, w) = x.dims();
        let k = p.kernel;
        let pad = (k - 1) / 2;
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        let mut out = TensorBase::<f64>::zeros(n, p.c_out, h, w).unwrap();
        for bn in 0..n {
            let mut mid = vec![vec![0.0f64; h * w]; c];
            for bc in 0..c {
                let mut padded = vec![0.0f64; ph * pw];
                for y in 0..h {
                    for xx in 0..w {
                        padded[(y + pad) * pw + (xx + pad)] = x.at(bn, bc, y, xx);
                    }
                }
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = p.dw_bias[bc];
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += padded[(y + dy) * pw + (xx + dx)] * p.dw_kernel[(bc * k + dy) * k + dx];
                            }
                        }
                        mid[bc][y * w + xx] = acc;
                    }
                }
            }
            for oc in 0..p.c_out {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = p.pw_bias[oc];
                        for bc in 0..c {
                            acc += mid[bc][y * w + xx] * p.pw_kernel[oc * c + bc];
                        }
                        out.set(bn, oc, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    fn random_params(c_in: usize, c_out: usize, k: usize, seed: u64) -> ConvParamsBase<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvParamsBase::<f64>::init(c_in, c_out, k, &mut rng).unwrap()
    }

    #[test]
    fn rejects_even_kernel() {
        assert!(matches!(
            ConvParams::zeros(3, 4, 4),
            Err(Error::EvenKernel { size: 4 })
        ));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let p = ConvParams::zeros(3, 4, 3).unwrap();
        let x = TensorBase::<f32>::zeros(1, 2, 5, 5).unwrap();
        assert!(matches!(
            dwconv_forward(&x, &p),
            Err(Error::ChannelMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ConvParams::init(3, 5, 3, &mut rng).unwrap();
        for b in p.dw_bias.iter_mut().chain(p.pw_bias.iter_mut()) {
            *b = 0.0;
        }
        let x = TensorBase::<f32>::zeros(2, 3, 4, 4).unwrap();
        let y = dwconv_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn impulse_against_reference() {
        // Identity impulse through an all-ones 3x3 depthwise kernel and a
        // unit pointwise stage spreads the impulse over its neighborhood.
        let x = TensorBase::<f64>::from_fn(1, 1, 3, 3, |_, _, y, xx| {
            if y == 1 && xx == 1 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let p = ConvParamsBase::<f64>::new(
            1,
            1,
            3,
            vec![1.0; 9],
            vec![0.0],
            vec![1.0],
            vec![0.0],
        )
        .unwrap();
        let got = dwconv_forward(&x, &p).unwrap();
        let want = reference_dwconv(&x, &p);
        assert_eq!(got.max_abs_diff(&want), 0.0);
        assert_eq!(got.at(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn ones_input_counts_in_bounds_taps() {
        // With an all-ones input and all-ones kernel, each output equals the
        // number of taps that land inside the image: 4 at corners, 6 on
        // edges, 9 in the interior.
        let x = TensorBase::<f64>::from_fn(1, 1, 3, 3, |_, _, _, _| 1.0).unwrap();
        let p = ConvParamsBase::<f64>::new(
            1,
            1,
            3,
            vec![1.0; 9],
            vec![0.0],
            vec![1.0],
            vec![0.0],
        )
        .unwrap();
        let y = dwconv_forward(&x, &p).unwrap();
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        for (i, want) in expected.iter().enumerate() {
            assert_eq!(y.data()[i], *want);
        }
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (c_in, c_out, k, h, w) in [(3, 5, 3, 6, 7), (2, 2, 5, 8, 8), (4, 1, 7, 9, 5)] {
            let p = random_params(c_in, c_out, k, rng.gen());
            let x = TensorBase::<f64>::random_uniform(2, c_in, h, w, -1.0, 1.0, &mut rng).unwrap();
            let got = dwconv_forward(&x, &p).unwrap();
            let want = reference_dwconv(&x, &p);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn param_count_example_and_enumeration_agree() {
        // 16 channels in and out with a 3x3 depthwise stage:
        // 16*9 + 16 + 16*16 + 16 = 432.
        assert_eq!(ConvParams::param_count(16, 16, 3), 432);
        let p = ConvParams::zeros(16, 16, 3).unwrap();
        assert_eq!(p.stored_param_count(), 432);
        let q = ConvParams::zeros(3, 8, 5).unwrap();
        assert_eq!(q.stored_param_count(), ConvParams::param_count(3, 8, 5));
    }

    #[test]
    fn backward_of_zero_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParams::init(2, 3, 3, &mut rng).unwrap();
        let x = Tensor::random_uniform(1, 2, 4, 4, -1.0, 1.0, &mut rng).unwrap();
        let go = Tensor::zeros(1, 3, 4, 4).unwrap();
        let (gx, gp) = dwconv_backward(&x, &p, &go).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
        assert!(gp.dw_kernel.iter().all(|v| *v == 0.0));
        assert!(gp.pw_kernel.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(2, 3, 3, 17);
        let x = TensorBase::<f64>::random_uniform(1, 2, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let g1 = TensorBase::<f64>::random_uniform(1, 3, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let g2 = g1.map(|v| 2.0 * v);
        let (gx1, gp1) = dwconv_backward(&x, &p, &g1).unwrap();
        let (gx2, gp2) = dwconv_backward(&x, &p, &g2).unwrap();
        assert!(gx1.map(|v| 2.0 * v).max_abs_diff(&gx2) < 1e-12);
        for (a, b) in gp1.dw_kernel.iter().zip(&gp2.dw_kernel) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        // Scalar objective: inner product of the forward output with a fixed
        // random tensor. Analytic gradients must match central differences at
        // h = 1e-4 to a relative error below 1e-3.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = random_params(2, 3, 5, 29);
        let x = TensorBase::<f64>::random_uniform(2, 2, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let r = TensorBase::<f64>::random_uniform(2, 3, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let loss = |p: &ConvParamsBase<f64>, x: &TensorBase<f64>| -> f64 {
            let y = dwconv_forward(x, p).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, gp) = dwconv_backward(&x, &p, &r).unwrap();

        let h = 1e-4;
        let mut worst = 0.0f64;
        macro_rules! check_buf {
            ($buf:ident) => {
                for i in 0..p.$buf.len() {
                    let orig = p.$buf[i];
                    p.$buf[i] = orig + h;
                    let up = loss(&p, &x);
                    p.$buf[i] = orig - h;
                    let down = loss(&p, &x);
                    p.$buf[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let a = gp.$buf[i];
                    worst = worst.max(crate::gradcheck::relative_error(a, fd));
                }
            };
        }
        check_buf!(dw_kernel);
        check_buf!(dw_bias);
        check_buf!(pw_kernel);
        check_buf!(pw_bias);

        let mut xp = x.clone();
        for i in 0..xp.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let up = loss(&p, &xp);
            xp.data_mut()[i] = orig - h;
            let down = loss(&p, &xp);
            xp.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(crate::gradcheck::relative_error(gx.data()[i], fd));
        }
        assert!(worst < 1e-3, "worst relative error {}", worst);
    }
}
