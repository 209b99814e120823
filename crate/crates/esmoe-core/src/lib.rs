//! Efficient sparse mixture-of-experts block, built from scratch.
//!
//! The block routes each input through a small subset of depthwise-separable
//! convolution experts with distinct kernel sizes, chosen by a lightweight
//! global gating network. Training uses soft top-k routing (differentiable,
//! all experts run); inference uses hard top-k routing (only the selected
//! experts run, verifiably). A load-balancing loss keeps expert utilization
//! from collapsing.
//!
//! The crate also ships everything needed to exercise the block end to end:
//! a rank-4 tensor with hand-written forward/backward kernels, a synthetic
//! multi-scale dataset, an SGD training loop with cosine learning-rate
//! decay, finite-difference gradient checking, a binary checkpoint format,
//! an analytic-plus-instrumented cost model, a latency benchmark harness,
//! and PGM heatmap export of routing weights.
//!
//! All randomness flows through seeded, stream-addressed ChaCha generators
//! and all reductions run in a fixed order, so every result — training
//! metrics included — is bit-for-bit reproducible.

#![forbid(unsafe_code)]

pub mod block;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod viz;

pub use block::{
    esmoe_backward, esmoe_forward, esmoe_forward_dense, gate_logits, EsMoeConfig, ExpertBank,
    ExpertBankBase, RoutingMode, RoutingOutcome,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use cost::{count_costs, run_latency, BenchMode, BenchResult, BenchSpec, CostModel};
pub use data::{generate, DatasetSpec, SynthSample};
pub use error::{Error, Result};
pub use gradcheck::{run_gradcheck, GradCheckReport};
pub use loss::{load_balance_loss, routing_entropy, utilization, LossBreakdown, UtilizationStats};
pub use tensor::{Tensor, TensorBase};
pub use train::{evaluate, train, Classifier, ClassifierBase, TrainConfig, TrainReport};
