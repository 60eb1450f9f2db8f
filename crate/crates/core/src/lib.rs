//! Near/far-field holographic MIMO channel toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`steering`]: uniform planar array geometry and the planar / spherical
//!   wavefront steering kernels with their analytic derivatives.
//! - [`channel`]: path parameters, scenario sampling and Gaussian channel
//!   synthesis.
//! - [`em`]: expectation-maximization over the hidden near/far label of each
//!   path, with a preconditioned gradient-ascent M-step.
//! - [`outage`]: outage probability, analytically through the non-central
//!   chi-squared CDF and by Monte Carlo.
//! - [`baselines`]: grid-dictionary simultaneous OMP benchmarks (far-field
//!   and polar-domain).
//! - [`io`]: sample-set text and binary formats.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod baselines;
pub mod channel;
pub mod em;
mod error;
pub mod io;
mod linalg;
pub mod outage;
pub mod rng;
pub mod steering;

pub use error::{Error, Result};
pub use num_complex::Complex64;
