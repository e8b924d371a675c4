//! Core of a text-conditioned latent-diffusion generator for eight-variable
//! treasury-futures daily series.
//!
//! The pipeline maps a normalized series to an aligned Haar wavelet grid
//! ([`signal`]), compresses the grid with a U-shaped VAE built from latent
//! query attention ([`uvae`]), and learns the latent distribution with a
//! transformer denoiser conditioned on structured market descriptions
//! ([`diffusion`], [`finmap`]). [`sampler`] runs the reverse process and maps
//! latents back to prices; [`metrics`] scores generations.
//!
//! The crate needs only `alloc`. File formats, training loops and the
//! command line live in the companion `tfcodit` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod finmap;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod signal;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod uvae;

pub use error::{Error, Result};
pub use tensor::Matrix;
