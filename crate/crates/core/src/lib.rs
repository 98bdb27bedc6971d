//! Sparse training with linearized Bregman iterations.
//!
//! The crate is organised around a flat parameter vector ([`ParamVector`])
//! whose structure is described by a [`GroupLayout`]:
//!
//! - [`regularizers`]: sparsity promoting functionals, their proximal maps,
//!   subgradient selections and Bregman distances.
//! - [`optim`]: LinBreg, LinBreg with momentum and AdaBreg, plus the SGD,
//!   Adam and proximal gradient baselines.
//! - [`init`]: sparse, variance preserving parameter initialization.
//! - [`nn`]: small fully connected networks with hand written backprop.
//! - [`problems`]: strongly convex quadratic testbeds and MNIST IDX loading.
//! - [`analysis`]: sparsity metrics and executable convergence checks.

pub mod analysis;
pub mod error;
pub mod init;
pub mod nn;
pub mod optim;
pub mod problems;
pub mod regularizers;

pub use error::{Error, Result};
pub use regularizers::{Block, BlockKind, GroupLayout, Penalty, Regularizer};

/// Flat parameter storage. Every vector-valued quantity of the optimizers
/// (iterates, subgradients, gradients, moment buffers) uses this type.
pub type ParamVector = ndarray::Array1<f64>;
