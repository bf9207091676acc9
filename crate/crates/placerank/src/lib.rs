//! File formats, dataset IO, benchmarks and the experiment runner around
//! `placerank-core`.

pub mod bench;
mod bin_io;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod desk;
pub mod error;
pub mod ingest;
pub mod ppm;
pub mod store_file;

pub use config::Config;
pub use error::{Error, Result};
pub use placerank_core as core;
