//! Lifelong VAE-GAN: a hybrid variational autoencoder / Wasserstein GAN
//! trained over a sequence of tasks with generative replay.

pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod conjugate;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod grid;
pub mod latent;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod probe;
pub mod replay;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
