//! Numerical testbed for how label granularity shapes what a shallow
//! convolutional ReLU learner picks up from patch-dictionary data: generate
//! the hierarchical feature distribution, train under coarse or fine-grained
//! labels with the exact SGD and bias schedules, and probe initialization
//! geometry, training phases and hard-example behavior. Also ships the
//! label-hierarchy tools (k-means pseudo-labels, taxonomy level tracing).

pub mod data;
pub mod dict;
pub mod error;
pub mod exp;
pub mod hierarchy;
pub mod model;
pub mod params;
pub mod probes;
pub mod rng;
pub mod sets;
pub mod trainer;

pub use error::{Result, SimError};

/// Master seed of the shipped workstation-scale experiment.
pub const DEFAULT_MASTER_SEED: u64 = 42;
