//! Simulator for federated ensemble training.
//!
//! Clients are grouped into strata; several models ("modes") are trained
//! in parallel by rotating them over the strata, and predictions are
//! averaged across modes. The crate also carries a closed-form kernel
//! oracle for the linear RBF model, evaluation harnesses, and the
//! experiment presets used by the `simfed` binary.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod federation;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod rng;

pub use error::{Result, SimError};
pub use exec::ExecMode;
pub use federation::{run_training, Algo, Ensemble, Federation, TrainingConfig};
pub use models::{Model, WeightVector};
