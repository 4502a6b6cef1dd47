//! Stochastic operator networks.
//!
//! A DeepONet whose branch network is an Euler–Maruyama discretized SDE. The
//! branch parameters are trained with per-layer Hamiltonian gradients obtained
//! from a sample-wise backward adjoint SDE; the trunk and output bias use
//! ordinary backpropagation.

// `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod error;

pub mod branch;
pub mod diagnostics;
pub mod grf;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod presets;
pub mod runner;
pub mod training;

pub use error::{Error, Result};
