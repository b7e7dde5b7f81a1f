pub mod classifier;
pub mod config;
pub mod data_io;
pub mod error;
pub mod generator;
pub mod gzsl_eval;
pub mod numerics;
pub mod orchestrator;
pub mod policy_opt;
pub mod selector;

pub use error::{Error, Result};
