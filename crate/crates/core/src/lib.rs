//! Transducer (RNN-T) full-sum loss, knowledge-distillation losses and a
//! toy trainable transducer for teacher/student experiments.

pub mod config;
pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod jsonl;
pub mod lattice;
pub mod logspace;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
