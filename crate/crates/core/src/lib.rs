//! Bergman kernels and determinantal point processes on model Kähler spaces.
//!
//! The crate realizes a handful of explicit weighted spaces (the Ginibre plane,
//! the Fubini–Study sphere at power `k`, and finite products of spheres) and
//! provides the numerical machinery around their Bergman (Christoffel–Darboux)
//! kernels:
//!
//! - [`model_space`]: charts, weights, base measures and orthonormal section bases.
//! - [`quadrature`]: radial–angular tensor grids and Gram matrices.
//! - [`kernel`]: finite-rank kernels, their determinants and the universal
//!   limit kernel `B_∞` of the `k → ∞` scaling regime.
//! - [`sampler`]: exact projection-DPP sampling, Metropolis–Hastings for the
//!   weighted processes and a discrete projection-DPP oracle.
//! - [`statistics`]: intensity, counting and convergence diagnostics.
//! - [`energy`]: partition functions, cumulant-generating functions,
//!   Monge–Ampère densities and the Mabuchi functional.
//! - [`cli`]: the `bergdpp` command-line front end and its weight-expression language.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chart_fn;
pub mod cli;
pub mod energy;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod model_space;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod statistics;
pub mod weight_expr;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = nalgebra::Complex<f64>;

/// A point in a chart `ℂⁿ`, one complex coordinate per factor.
pub type Point = Vec<C64>;
