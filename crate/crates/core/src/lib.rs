//! Invertible neural networks trained as (variational) autoencoders through
//! a zero-padded latent bottleneck, together with classical autoencoder
//! baselines, a small reverse-mode autodiff engine, dataset readers and an
//! experiment harness.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inn;
mod kernels;
pub mod layers;
pub mod losses;
pub mod models;
pub mod optim;
pub mod tensor;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
