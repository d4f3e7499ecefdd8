//! Core library for many-to-one multi-scale gene-expression regression.
//!
//! Everything numeric lives here: a minimal reverse-mode differentiable
//! array engine ([`tape`]), named parameter stores with Adam ([`params`]),
//! a finite-difference gradient checker ([`gradcheck`]), the multi-scale
//! patch embedding ([`embedding`]) and encoder stack ([`encoder`]),
//! expression preprocessing and pyramid patch extraction ([`data`]), a
//! seeded synthetic dataset generator ([`synth`]), the training loop
//! ([`train`]) and the evaluation metrics and ablation harness ([`eval`]).
//!
//! The crate is `no_std` (with `alloc`); file formats, CSV/PGM writers and
//! the command-line interface live in the companion `m2ost` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;

pub use config::ModelConfig;
pub use error::Error;
pub use params::ParamStore;
pub use tape::{DiffArray, Precision, Tape};

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
