//! Federated learning simulator with partial-network updates.
//!
//! The crate trains small models across simulated clients where each round
//! may restrict training and upload to a single layer group, and accounts
//! for the resulting communication and compute costs exactly.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model_zoo;
pub mod params;
pub mod schedule;
pub mod seed;
pub mod tensor;

pub use config::{run_experiment, ExperimentConfig};
pub use error::{Error, Result};
pub use params::{LayerMask, LayerPartition, ParamGroup, ParamSet, Slot, SlotId};
pub use tensor::Tensor;
