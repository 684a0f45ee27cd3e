//! Empirical information-theoretic generalization bounds for noisy
//! meta-learners trained under the supersample protocol.

pub mod bounds;
pub mod harness;
pub mod infotheory;
pub mod metalearn;
pub mod model;
pub mod supersample;
pub mod tasks;
