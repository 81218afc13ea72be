//! Command implementations behind the `wildground` binary.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod eval;
pub mod threads;
pub mod train;

pub use config::{Preset, RunConfig};
pub use train::{train, NonFiniteLoss, RunReport, TrainOptions, Trainer};
