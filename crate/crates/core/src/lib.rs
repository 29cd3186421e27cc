//! A numerical laboratory for Gaussian variational autoencoders on
//! synthetic nonlinear-ICA data.
//!
//! The crate trains small VAEs whose decoder precision `gamma_sq` is swept
//! toward the near-deterministic regime and measures three things: that the
//! optimal encoder inverts the decoder (self-consistency), that the ELBO
//! approaches the IMA-regularized log-likelihood whose regularizer is the
//! column-orthogonality contrast of the decoder Jacobian, and that
//! identifiability of the true sources (MCC) tracks that contrast.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode scalar tape powering all gradients.
//! - [`linalg`]: dense matrices, LU/QR, matrix exponential.
//! - [`nets`]: MLPs, initialization schemes, smooth Leaky ReLU.
//! - [`mixing`]: ground-truth mixings, their Jacobians, datasets.
//! - [`ima`]: the local/global IMA contrast and regularized objective.
//! - [`vae`]: the Gaussian VAE, ELBO evaluation, Adam training.
//! - [`analysis`]: optimal-variance predictions, ELBO*, gap reports,
//!   linear-model closed forms.
//! - [`metrics`]: MCC with indeterminacy removal, slope fits.
//! - [`rng`]: deterministic seed derivation.

// Indexed loops are the house style in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod hexfloat;
pub mod ima;
pub mod linalg;
pub mod metrics;
pub mod mixing;
pub mod nets;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
