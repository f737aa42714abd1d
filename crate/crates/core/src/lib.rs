//! Padding-aware blocked sigmoid attention on CPU.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`batch`] — jagged (variable-length) padded Q/K/V batches, a synthetic
//!   length-distribution generator, and a binary fixture container.
//! - [`reference`] — dense, unblocked softmax/sigmoid attention in double
//!   precision: the correctness oracle for everything else.
//! - [`kernel`] — the tiled sigmoid-attention kernels: forward, backward dQ,
//!   and backward dK/dV, with fully-padded-block skipping and per-tile
//!   recomputation in the backward pass.
//! - [`analysis`] — finite-difference gradient checking and numerical probes
//!   of the softmax/sigmoid weight-Jacobian structure.
//! - [`bench`] — FLOP accounting, wall-clock measurement with confidence
//!   intervals, TFLOPS reporting, and GPU-hour projection.
//! - [`lab`] — a desk-scale masked-LM encoder with fully manual gradients,
//!   instrumented for training-stability experiments.
//! - [`mmd`] — maximum mean discrepancy between embedding sets with RBF
//!   kernel, median-heuristic bandwidth, and bootstrap confidence intervals.

pub mod analysis;
pub mod batch;
pub mod bench;
pub mod error;
pub mod kernel;
pub mod lab;
pub mod mmd;
pub mod reference;
pub mod seed;
pub mod tensor;

pub use batch::{JaggedBatch, LengthDistribution, LengthDistributionSpec};
pub use error::{Error, Result};
pub use kernel::{AccumulatorPrecision, KernelStats, SigmoidMode, TileConfig};
pub use reference::{AttentionConfig, BiasMode, Mechanism, ScoreMatrix};
pub use tensor::{Real, Tensor4};
