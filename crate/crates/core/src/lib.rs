//! Measurement-error correction for a covariate observed through several
//! error-prone proxies that need not be identically distributed.
//!
//! Each proxy follows `X*_j = eta0_j + eta1_j X + error`. Moments of the
//! proxies identify the correction parameters (see [`correction`]), which
//! then drive regression calibration ([`calibration`]), simulation
//! extrapolation ([`simex`]) and moment reconstruction ([`mr`]). Every
//! estimator is an M-estimator and comes with a stacked sandwich covariance.

// Index loops mirror the matrix algebra; `!(a < b)` comparisons are
// deliberate so that NaN takes the failing branch.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod calibration;
pub mod correction;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mr;
pub mod outcome;
pub mod rng;
pub mod simex;
pub mod stacked;

pub use error::{MeError, Result};
