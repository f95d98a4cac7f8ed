//! Fully-connected knowledge-interaction distillation for dual-encoder
//! text-image retrieval.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases at
//! the bottom of this file fix the scalar to `f64`, which is what the
//! training pipeline, file formats and CLI use.

pub mod cona;
pub mod encoders;
pub mod error;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod retrieval;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type EmbeddingBatch = losses::EmbeddingBatch<f64>;
pub type LossValue = losses::LossValue<f64>;
pub type SimilarityDistribution = losses::SimilarityDistribution<f64>;
pub type Encoder = encoders::Encoder<f64>;
pub type EncoderParams = encoders::EncoderParams<f64>;
pub type DualEncoderBundle = encoders::DualEncoderBundle<f64>;
pub type RetrievalIndex = retrieval::RetrievalIndex<f64>;
pub type SyntheticDataset = training::SyntheticDataset<f64>;
