//! Quasi-Monte Carlo latent variable models.
//!
//! A QLVM is a decoder-only generative model with a low-dimensional latent
//! space on the flat torus `[0, 1)^d`. The marginal likelihood of each datum
//! is integrated with a randomly shifted rank-1 lattice rule, and the same
//! lattice yields a discrete posterior over latent space at inference time.
//!
//! Crate layout:
//!
//! * [`lattice`] builds Fibonacci and Korobov rules, shifts them and maps
//!   uniform points through prior transforms.
//! * [`net`] is a small dense-network engine with hand-written reverse-mode
//!   gradients and Adam.
//! * [`qlvm`] holds the lattice evidence objective, the training loop and
//!   posterior inference.
//! * [`baselines`] provides VAE and IWAE models with Gaussian encoders.
//! * [`analysis`] covers aggregate densities, toroidal mean-shift, decoder
//!   Jacobian fields, smoothing, geodesics and traversals.
//! * [`data`] loads IDX files, generates synthetic blob images, splits data
//!   and persists checkpoints.
//! * [`export`] writes CSV tables and PGM rasters.
//!
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon. Disabling it gives a purely sequential build with identical
//! results.

pub mod analysis;
pub mod baselines;
pub mod data;
mod error;
pub mod export;
pub mod kv;
pub mod lattice;
pub mod net;
mod par;
pub mod qlvm;

pub use error::{Error, Result};
