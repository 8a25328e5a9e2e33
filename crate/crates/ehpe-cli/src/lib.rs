//! Command-line workflows: dataset generation, two-phase training,
//! checkpoint evaluation, and ablation sweeps.
//!
//! The binary (`ehpe`) is a thin clap wrapper; everything it does lives in
//! these modules so the integration and acceptance suites can drive the same
//! code paths in-process.

pub mod ablate;
pub mod evalrun;
pub mod manifest;
pub mod runner;
pub mod trainer;

pub use runner::{build_full, build_full_for_load, build_tw, predict_full, predict_tw};
pub use trainer::{lr_schedule, train, Adam, Phase, TrainConfig, TrainOutcome};
