//! Discretized parabolic Monge-Ampère flow in one dimension.
//!
//! Potentials are stacks of residual layers ([`potential`]), driven either by
//! the analytic oracle or by learned residuals ([`neural`]) through the flow
//! runner in [`flow`]. [`gaussian`] holds closed forms used as oracles,
//! [`divergence`] the KL / W2 / Bregman / MMD diagnostics, and [`vi`] the
//! Gaussian variational-inference iteration.

// `!(x > 0.0)` is used on purpose so NaN fails positivity checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod divergence;
pub mod error;
pub mod flow;
pub mod gaussian;
pub mod jet;
pub mod neural;
pub mod potential;
pub mod quadrature;
pub mod seed;
pub mod vi;

pub use error::{Error, Result};
