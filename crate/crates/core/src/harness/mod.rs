//! Synthetic data, training, evaluation and window tracing.

pub mod config;
pub mod data;
pub mod eval;
pub mod train;
pub mod viz;
