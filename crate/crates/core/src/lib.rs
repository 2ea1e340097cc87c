pub mod archive;
pub mod error;
pub mod fourier;
pub mod nn;
pub mod objectives;
pub mod sampling;
pub mod model;
pub mod data;
pub mod cs;
pub mod recon;
pub mod trainer;
