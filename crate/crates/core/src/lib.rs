//! Federated learning simulation with layer-divergence feedback aggregation.
//!
//! Each round the server broadcasts its model, a random subset of clients
//! trains locally, every participant reports how far each of its layers moved,
//! and only the `n` clients with the largest movement upload each layer. The
//! crate also provides the FedAvg and random-selection baselines, byte
//! accounting, and tools to evaluate the associated convergence bound against
//! simulation traces.

pub mod aggregation;
pub mod analysis;
pub mod config;
pub mod datasets;
pub mod engine;
pub mod nn;
pub mod report;
pub mod rng;
pub mod trace;

pub use aggregation::{DivergenceMatrix, SelectionMatrix};
pub use analysis::BoundParams;
pub use config::{Algorithm, ExperimentConfig};
pub use datasets::{Dataset, Partition};
pub use engine::{run_experiment, RoundMetrics, Simulation};
pub use nn::{Batch, LayeredGradient, LayeredModel, ParameterLayer};
pub use trace::TraceRecord;
