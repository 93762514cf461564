//! Experiment harnesses over the core layers: configs, training loops,
//! metrics, sweeps, and synthetic corpus generation.

pub mod config;
pub mod datagen;
pub mod metrics;
pub mod model;
pub mod sweep;
pub mod train;
