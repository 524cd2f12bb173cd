//! Pipeline driver for the `film` binary: split, vectorize, triplets, train,
//! select-k, predict, evaluate and bench.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use cli::run;
pub use error::{CliError, CliResult};
