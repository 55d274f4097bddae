//! Masked-diffusion transformer inference with dual prompt/response
//! feature caches.
//!
//! [`engine::generate`] runs the denoising loop. The [`policy`] decides per
//! step and layer which side of the cache is refreshed, and the adaptive
//! case recomputes only the response tokens whose values drifted most.
//! [`engine::reference_generate`] is the uncached oracle.

pub mod cache;
pub mod engine;
mod error;
mod kernels;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod tensor;
pub mod trace;

pub use cache::{DualCache, Feature, LayerFeatures, Side};
pub use engine::{generate, reference_generate, GenConfig, Generation, GenerationOutput};
pub use error::{Error, Result};
pub use metrics::{analytic_flops, compare_outputs, speedup, RunMetrics};
pub use model::{ModelConfig, ModelParams, TokenId};
pub use policy::{CachePolicy, LayerCase, SimilarityMetric};
