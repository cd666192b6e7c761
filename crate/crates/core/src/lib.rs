//! Forecasting short, noisy time series with a coupled-diffusion hierarchical
//! VAE, a denoising score-matching energy network and a disentanglement penalty.

pub mod checkpoint;
pub mod data;
pub mod denoise;
pub mod disentangle;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
