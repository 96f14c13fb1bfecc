//! Supervised contrastive continual learning with an adaptive kNN
//! classification criterion.
//!
//! The pipeline trains a small hashing + MLP encoder task by task with a
//! supervised contrastive objective, regularizes drift with instance-wise
//! relation distillation against the previous task's frozen encoder, replays
//! K-means-selected exemplars, and classifies by k-nearest-neighbour retrieval
//! over exemplars re-encoded with the current model.

pub mod config;
pub mod data;
pub mod diffcore;
pub mod encoder;
mod error;
pub mod knn;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod rng;
pub mod rundir;
pub mod selector;
pub mod trainer;

pub use error::{Error, Result};
