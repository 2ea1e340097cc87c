//! Command-line pipeline around the `pcrnn` library: dataset simulation,
//! training, reconstruction, evaluation and report figures.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
