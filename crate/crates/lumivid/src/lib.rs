//! Desk-scale multimodal video diffusion with joint camera and lighting control.
//!
//! From a single input image, a camera trajectory, and an HDR environment map,
//! the model jointly generates aligned novel-view, albedo, and relit video
//! latents. Ground truth comes from a built-in analytic Lambertian renderer,
//! so every stage of the pipeline is exactly testable: geometry, lighting,
//! tokenizer, denoiser, sampler, and training loop.

pub mod cli;
pub mod conditioning;
pub mod config;
pub mod container;
pub mod dataset;
pub mod diffusion;
pub mod geometry;
pub mod imageio;
pub mod lighting;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
