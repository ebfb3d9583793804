//! Simulator for federated learning with encrypted data sharing (FedEDS)
//! alongside FedAvg, FedProx and FedNova baselines.

pub mod aggregation;
pub mod data;
pub mod encryption;
pub mod error;
pub mod format;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
