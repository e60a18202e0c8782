//! Toy-scale low-bias dataset generation.
//!
//! A conditional latent denoiser is pre-trained on a deliberately biased
//! synthetic world, then fine-tuned through a low-rank adapter with a
//! bi-level semantic alignment loss (adversarial dataset-level alignment
//! plus per-image cosine alignment in a frozen image/text embedding space)
//! and a quality-assurance loss. The fine-tuned generator synthesizes a
//! labeled dataset from class names alone, and the evaluation module
//! measures texture inclination, context bias, background gap, and
//! linear-probe transfer.

pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod nn;
pub mod quality;
pub mod report;
pub mod rng;
pub mod stack;
pub mod synthesis;
pub mod tensor;
pub mod trainer;
pub mod vocab;
pub mod worldgen;

pub use config::{load_config, RunConfig};
pub use error::{ConfigError, Error, Result};
pub use image::ToyImage;
pub use rng::{derive_stream, RngStream};
pub use tensor::Tensor;
pub use vocab::{ClassVocabulary, FeatureVector};
