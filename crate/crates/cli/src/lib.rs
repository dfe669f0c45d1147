//! Reproducible, file-backed experiments around [`lsb_core`]: data
//! generation, denoiser training, translation, budget sweeps and an
//! invariant battery.
//!
//! Every command reads an [`ExperimentConfig`] and writes under its output
//! directory. Apart from the `.meta` sidecars (wall-clock timestamps and run
//! times) outputs are byte-identical across reruns with the same
//! configuration.

pub mod check;
pub mod commands;
pub mod config;
mod error;
pub mod experiment;

pub use config::{Ablation, BackendKind, ExperimentConfig, Method};
pub use error::{CliError, Result};
