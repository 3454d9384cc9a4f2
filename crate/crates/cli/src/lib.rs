//! Command-line front end for the qsm library: phantoms, forward simulation,
//! classical inversions, training sweeps, and evaluation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
