//! Penalized spline estimation for concave extended linear models.
//!
//! The crate builds B-spline spaces ([`basis`]), exact roughness penalties and
//! their eigenanalysis ([`penalty`]), seven concave likelihoods ([`models`]),
//! a damped Newton maximizer of the penalized likelihood ([`solver`]), data
//! generators with known truths ([`simulate`]), and a Monte Carlo harness that
//! measures empirical convergence rates ([`harness`]). Datasets are read and
//! written as CSV by [`io`].

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod harness;
pub mod io;
pub mod models;
pub mod penalty;
pub mod quadrature;
pub mod simulate;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
