//! Multi-class user-equilibrium traffic assignment over fixed k-shortest path
//! sets, and an encoder-decoder transformer surrogate that predicts the
//! equilibrium path flows directly from network and demand features.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! clocks or sockets lives in the companion `pathflow` crate.
//!
//! Module map:
//!
//! - [`network`]: graph model, BPR link costs, path costs, flow loading.
//! - [`paths`]: loopless k-shortest path sets per OD pair.
//! - [`equilibrium`]: restricted UE solver (gradient projection) and the
//!   equilibrium-quality residuals.
//! - [`datagen`]: scenario sampling, input/target tensors, normalization.
//! - [`tensor`]: dense tensors, reverse-mode tape, layers, Adam.
//! - [`model`]: the flow transformer, its training step and inference.
//! - [`metrics`]: MAE/MAPE/AD metrics and report assembly.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod datagen;
pub mod equilibrium;
mod error;
pub mod metrics;
pub mod model;
pub mod network;
pub mod paths;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
