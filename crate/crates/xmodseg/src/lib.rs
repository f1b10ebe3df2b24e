//! File formats, dataset trees, checkpoints and the training driver on top
//! of `xmodseg-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod fsio;
pub mod inference;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use xmodseg_core as core;
