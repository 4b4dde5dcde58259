//! Compact geospatial foundation model pipeline: a small autodiff engine,
//! ViT encoders trained by dual masked-autoencoder distillation, task heads,
//! spectral auto-labelling, datacube plumbing, FP16 deployment and metrics.

pub mod deploy;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod heads;
pub mod labelling;
pub mod mae;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod vit;

pub use error::{Error, ErrorCategory, Result};
pub use rng::RngStream;
pub use tensor::{DType, Tensor};
