//! Treatment-effect estimation in weakly separable models with a binary
//! endogenous treatment, by matching truncated outcome distributions across
//! treatment arms.
//!
//! Modules, bottom to top: [`num`] (kernels, quadrature, summaries), [`dgp`]
//! (designs and oracles), [`hfunc`] (h functions and distances),
//! [`estimators`], [`montecarlo`] (replicated studies) and [`cli`].

pub mod cli;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod hfunc;
pub mod montecarlo;
pub mod num;

pub use error::{Error, Result};
