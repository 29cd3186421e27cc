//! Experiment orchestration for the VAE/nonlinear-ICA laboratory:
//! configuration presets, deterministic sweep execution, CSV/JSON export,
//! and the acceptance suite.

pub mod config;
pub mod records;
pub mod runner;
pub mod verify;
