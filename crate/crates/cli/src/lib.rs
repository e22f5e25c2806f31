//! Experiment runner for `noisy-fedavg`: config files, presets, replica
//! sweeps, CSV traces and the verification suite.

pub mod config;
pub mod experiments;
pub mod io;
pub mod sweep;
pub mod verify;

pub use config::{Check, ExperimentFile, TaskSource};
pub use experiments::{run_experiment, write_outputs, ExperimentResult, Preset};
pub use sweep::UsageError;
