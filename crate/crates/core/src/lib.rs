//! Core library: synthetic bundle worlds, relational and fusion feature
//! pipelines, a small decoder LM with low-rank adapters, staged training,
//! and the evaluation harness.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod linalg;
pub mod optim;
pub mod prompting;
pub mod relational;
pub mod rng;
pub mod run;
pub mod tinylm;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Mat;
