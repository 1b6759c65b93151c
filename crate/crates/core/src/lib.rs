//! Parameter-efficient multi-modal fusion for paired clinical/dermoscopy
//! images: a weight-shared encoder, shared-projection cross-attention, a
//! branch-biased training loss, and the evaluation machinery around them.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod par;
pub mod rng;
pub mod trainer;
