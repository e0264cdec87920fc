//! Hallucination early detection on a toy diffusion model.
//!
//! The crate builds a desk-scale world in which every quantity has an exact
//! answer: scenes are Gaussian mixtures, the denoiser is the closed-form
//! mixture score, and the detector, Monte Carlo simulator and live
//! abort-and-reseed runtime can all be checked against analytic oracles.

pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod rng;
pub mod runtime;
pub mod scene;
pub mod stats;
pub mod tensor_io;
pub mod timesaver;

pub use error::{Error, Result};
pub use grid::Grid;
