//! compresslab: a desk-scale laboratory for compressed language-model
//! training and scaling-law analysis.
//!
//! The crate trains tiny decoder-only models under weight/activation
//! quantization or magnitude sparsity (straight-through estimation
//! throughout), collects run records, fits the compressed scaling law
//! `L(N, D) = a / (N * eff)^b + c / D^d + e`, and derives the downstream
//! analytics: effective-parameter multipliers, size gains, speedup
//! counting, Pareto frontiers, and compute-optimal data allocation.
//!
//! Start with the `examples/` directory for runnable tours of each
//! capability, or the `compresslab` binary for the experiment CLI.

pub mod cli;
pub mod tensor;

pub use tensor::{CoreError, Elem, Gradients, Tape, Tensor, Var};
