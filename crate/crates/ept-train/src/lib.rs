//! Training harness: toy backbone, synthetic multi-task data, the joint
//! objective, AdamW with a warmup/decay schedule, checkpointing, parameter
//! accounting, and merged-weight export.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod merge;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use config::EptConfig;
pub use error::{Result, TrainError};
