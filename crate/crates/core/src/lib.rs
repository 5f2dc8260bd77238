pub mod anonymizer_training;
pub mod batch_builder;
pub mod config;
pub mod data_model;
pub mod denoise_and_fer;
pub mod error;
pub mod image_io;
pub mod knowledge_priors;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod privacy_validation;
pub mod synth;

pub use error::{PpError, Result};

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, Pipeline, PipelineReport, STAGES};

pub type Anonymizer32 = models::AnonymizerModel<f32>;
pub type Denoiser32 = models::DenoiserModel<f32>;
pub type Embedder32 = models::PooledEmbedder<f32>;
pub type FrameClassifier32 = models::FrameClassifier<f32>;
pub type VideoClassifier32 = models::VideoClassifier<f32>;
pub type Embedding32 = data_model::EmbeddingVector<f32>;
pub type Embedding64 = data_model::EmbeddingVector<f64>;
