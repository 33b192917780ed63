//! Discovering low-dimensional dynamics from a single scalar time series.
//!
//! The pipeline: simulate or load a measurement series ([`dynsys`]), build a
//! time-delay (Hankel) embedding and its SVD basis ([`hankel`]), learn an
//! autoencoder into a latent space ([`neural`]) whose dynamics are a sparse
//! combination of library terms ([`sindy`]), trained jointly in
//! [`delaymodel`].

pub mod csvio;
pub mod delaymodel;
pub mod dynsys;
pub mod error;
pub mod hankel;
pub mod linalg;
pub mod neural;
pub mod sindy;

pub use error::{Error, Result};
