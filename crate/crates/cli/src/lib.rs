//! File formats, reports and command implementations for the many-to-one
//! multi-scale expression regressor. The numeric core lives in `m2ost-core`;
//! this crate adds everything that touches the filesystem plus the CLI.

pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod dataset_file;
pub mod error;
pub mod report;
pub mod runconfig;
