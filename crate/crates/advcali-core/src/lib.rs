//! Core algorithms for group-aware post-hoc calibration of graph node
//! classifiers.
//!
//! The crate is `no_std` (with `alloc`) and fully deterministic: every source
//! of randomness is a seeded splitmix64 stream, and all numeric paths are
//! sequential `f64`. IO, file formats, and the command-line front end live in
//! the companion `advcali` crate.
//!
//! Module map:
//!
//! - [`graph`]: CSR graphs, GCN normalization, degree utilities, datasets
//! - [`diff`]: reverse-mode tape over dense matrices
//! - [`models`]: GCN temperature scaler, GIN group detector, TS/VS baselines
//! - [`losses`]: cross-entropy, confidence, SoftAcc/SoftConf, Group-ECE
//! - [`metrics`]: global / degree / class-wise / subgraph ECE and bin stats
//! - [`community`]: Louvain modularity optimization
//! - [`trainer`]: adversarial training loop, label splits, cross-validation
//! - [`synth`]: stochastic block models and planted miscalibration

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod community;
pub mod diff;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

mod fmath;

pub use error::Error;
pub type Result<T> = core::result::Result<T, Error>;
