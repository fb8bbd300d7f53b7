//! Federated ensemble training.
//!
//! The training set is shuffled into mutually exclusive client shards,
//! every client trains the same architecture from the current global
//! weights for a number of local epochs, and the server forms the next
//! global model as the sample-weighted mean of the client weights. Rounds
//! repeat with full participation until a target metric or the round
//! budget is reached.

pub mod aggregator;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod partition;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod transport;

pub use error::Error;
pub use params::{ParamSet, Tensor};
