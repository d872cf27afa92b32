//! Command-line front end: training, multi-horizon evaluation with
//! autoregressive inference, forecast export, ω ablations and parameter
//! accounting.

pub mod ablate;
pub mod accounting;
pub mod commands;
pub mod config;
pub mod evaluate;
pub mod forecast;
pub mod run;
