//! Linear semantic extraction from generator feature maps.
//!
//! The crate builds a differentiable synthetic generator with analytic
//! ground truth, linear and nonlinear semantic extractors over its feature
//! maps, segmentation metrics, geometric analyses of the feature space, and
//! latent-space optimization for semantic editing and conditional sampling.

pub mod archive;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod latentopt;
pub mod metrics;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use generator::{
    sample_latent, AnalyticSegmenter, FeatureGenerator, FeatureGrad, FeatureStack, GeneratorConfig,
    LatentVector, Segmenter, SemanticMask, SyntheticGenerator,
};
pub use tensor::Map3;
