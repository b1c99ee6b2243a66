//! Variational inference for SDE-based regression and latent dynamics with
//! Wishart-process diffusion coefficients.
pub mod data;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod models;
pub mod ndcore;
pub mod params;
pub mod rng;
pub mod sdeflow;
pub mod svgp;
pub mod train;
pub mod wishart;

pub use error::{Error, Result};
