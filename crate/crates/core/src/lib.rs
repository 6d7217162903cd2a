//! Rearranged stochastic heat equation on the torus and mean field games with
//! common noise.
//!
//! The state of the population is a periodic quantile function sampled on the
//! half-torus ([`quantile`]). It is driven by a trace-class cosine noise
//! ([`spectral`]) through a split-step scheme that sorts after every linear
//! step ([`rshe`]). Equilibrium feedback fields are computed by a blockwise
//! Picard iteration ([`mfg`]) and checked against first-order optimality,
//! the distributed representation ([`feedback`]), a priori estimates
//! ([`diagnostics`]) and an independent deterministic solver ([`classical`]).

// `!(x > 0.0)` is the NaN-rejecting form used throughout the validation code.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod cost;
pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod field;
pub mod io;
pub mod mfg;
pub mod quantile;
pub mod rng;
pub mod rshe;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use quantile::{DiscreteMeasure, GridFunction, QuantileField};
