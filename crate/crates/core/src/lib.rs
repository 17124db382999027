//! Optimal pairs trading under proportional transaction costs: market model,
//! lattice dynamic programming for the buy/sell boundaries, path simulation,
//! strategy evaluation, calibration and scenario reporting.

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod calibration;
pub mod error;
pub mod general;
pub mod grid;
pub mod market;
pub mod path_sim;
pub mod scenario;
pub mod solver;
pub mod trading;

pub use error::{Error, Result};
