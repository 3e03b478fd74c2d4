//! Active learning for causal inference with expensive experiments.
//!
//! Two independent Gaussian-process surrogates model the treated and control
//! outcome surfaces. Acquisition rules pick the next unit and/or treatment so
//! as to shrink the posterior variance of a weighted treatment-effect
//! estimand, or to maximize cumulative individual effects under an
//! upper-confidence-bound rule. The [`simulation`] module reproduces the
//! benchmark study on a modified Franke surface.

pub mod error;
pub mod kernel_gp;
pub mod propensity;
pub mod surrogate;
pub mod acquisition;
pub mod simulation;

pub use error::{AceError, Result};
