//! Numeric kernels: convolutions, pooling, activations, and their backward
//! passes. Every reduction accumulates in `f64` regardless of storage type,
//! and every public operation validates shapes and finiteness.

mod activation;
mod dwconv;
mod gap;
mod pointwise;

pub use activation::{silu, silu_backward, softmax_backward, softmax_over_channels};
pub use dwconv::{dwconv_forward, dwconv_backward, ConvParams, ConvParamsBase};
pub use gap::{gap, gap_backward};
pub use pointwise::{pointwise1x1_backward, pointwise1x1_forward};
