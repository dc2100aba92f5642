//! Off-policy evaluation and constrained policy learning with incremental
//! propensity score policies.
//!
//! An incremental policy multiplies each unit's treatment odds by
//! `δ(x) = exp(features(x)·β)`, so it never asks for a treatment the data
//! could not have produced. Its value is identified without positivity,
//! and the estimators in [`ope`] never divide by a propensity.

// Guards written as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over parallel per-unit arrays read better than zips.
#![allow(clippy::needless_range_loop)]

pub mod constraints;
pub mod data;
pub mod error;
pub mod experiment;
pub mod learn;
pub mod nuisance;
pub mod numeric;
pub mod ope;
pub mod optim;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
