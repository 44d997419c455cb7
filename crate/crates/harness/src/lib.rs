//! Experiment runner for the sphere propagator and the modified free dynamics.
//!
//! Each experiment reads an [`config::ExperimentConfig`], writes CSV series, a flat
//! `key = value` summary and SVG plots, and reports pass/fail against thresholds taken from
//! the configuration.

pub mod config;
pub mod experiments;
pub mod fit;
pub mod plot;

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use experiments::{run_experiment, Outcome, RunError};
pub use fit::{fit_power_law, DecayFit};
