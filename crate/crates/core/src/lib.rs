//! Diffusion bridge matching teachers and their distillation into few-step generators.
//!
//! The crate is organised bottom-up: [`schedules`] holds the linear-drift
//! priors and their closed-form bridge coefficients, [`bridges`] samples
//! bridges and integrates reverse-time dynamics, [`netcore`] provides the
//! small MLP stack, [`matching`] trains bridge matching teachers, [`ibmd`]
//! distills them into few-step generators, [`oracles`] supplies exact
//! references and [`eval`] the distribution metrics.

// `!(x > 0.0)` also rejects NaN; index loops mirror the math over several arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bridges;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod eval;
pub mod ibmd;
pub mod matching;
pub mod netcore;
pub mod oracles;
pub mod predictor;
pub mod rng;
pub mod scenarios;
pub mod schedules;

pub use error::{Error, Result};
pub use predictor::X0Predictor;
pub use schedules::{BridgeCoeffs, Schedule};
