//! Closed-loop (self-retraining) dynamics of exponential-family models.
//!
//! A model is repeatedly refitted to samples drawn from its own previous
//! fit, optionally mixed with external samples and regularized by a prior.
//! The crate provides the exact discrete chain ([`closed_loop`]), its
//! continuous-time diffusion limit ([`sde`]), and analytic predictions for
//! absorption and stationary laws ([`analysis`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod closed_loop;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod models;
pub mod par;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use models::{ExponentialFamily, ExternalSource, Face, Fit, Model, State};
