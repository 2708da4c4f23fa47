//! Constrained optimization of sponsored-search GSP auction mechanisms.
//!
//! The pipeline replays logged auctions under a grid of ranking-function
//! parameters, calibrates predicted CTRs per slot position, aggregates the
//! outcomes into a coefficient table, and solves an entropy-regularized,
//! linearly constrained revenue-maximization program for a per-category
//! distribution over the grid. The resulting stochastic policy is served
//! by sampling one grid instance per request.

pub mod auction;
pub mod calibration;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod io;
pub mod optimizer;
pub mod policy;
pub mod simulator;

pub use error::{Error, Result};
