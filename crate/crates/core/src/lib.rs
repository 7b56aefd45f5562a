//! Finite-size parameter estimation for Gaussian-modulated CV-QKD.
//!
//! The crate simulates the linear Gaussian channel seen by a heterodyne
//! receiver, estimates its gain and noise variance either by maximum
//! likelihood or with a small regression network, attaches one-sided
//! worst-case bounds to both estimators, and turns the bounds into a
//! composable finite-size secret-key rate under collective Gaussian attacks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod delta;
pub mod error;
pub mod keyrate;
pub mod linalg;
pub mod mle;
pub mod nn;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
