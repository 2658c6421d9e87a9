//! Std companion to `pathflow-core`: file formats, dataset and checkpoint
//! storage, training orchestration, the `pathflow` CLI and the HTTP service.

mod error;
pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod netio;
pub mod output;
pub mod scenario;
pub mod service;
pub mod store;
pub mod tntp;
pub mod train;

pub use error::{Error, Result};
