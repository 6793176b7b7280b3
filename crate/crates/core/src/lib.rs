//! Deterministic federated-learning simulator built around server-side
//! dropout: per-device subnets are generated from the global model with
//! channel- and compute-adapted dropout rates, trained locally, and merged
//! back into complete models for averaging. A wireless cost model turns
//! subnet sizes into per-round communication and computation latencies.

pub mod channel;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod subnet;

pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutput, ExperimentSpec};
pub use nn::{Batch, GradStore, LayerKind, LayerSpec, ModelArch, ParamStore};
pub use rng::SeedTree;
pub use subnet::{SubnetPlan, SubnetParams};
