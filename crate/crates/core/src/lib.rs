//! Fast-Slow recurrent networks for character-level language modeling,
//! with stacked and sequential LSTM baselines, a small reverse-mode
//! autodiff engine, training, checkpoints, and the analyses used to
//! compare the architectures.

pub mod analysis;
pub mod arch;
pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
