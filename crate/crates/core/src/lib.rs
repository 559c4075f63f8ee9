//! Distributional regression discontinuity and kink estimation.
//!
//! Local polynomial estimation of conditional outcome distributions at a
//! cutoff, quantile treatment effect curves, the root-mean-square effect
//! `Psi` and its decompositions, and multiplier bootstrap inference.

pub mod data;
pub mod error;
pub mod locfit;
pub mod quantiles;
pub mod effects;
pub mod inference;
pub mod pipeline;
pub mod report;
pub mod simlab;

pub use data::{Dataset, Design, Observation, Side};
pub use error::{Error, Result};
