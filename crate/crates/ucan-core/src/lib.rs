//! Forward-only unlearning for adapter-augmented sequential recommenders.
//!
//! The pipeline trains a small low-rank-adapter next-item model, localizes
//! privacy-risky input dimensions from contrastive activation statistics
//! calibrated by utility importance, and soft-attenuates the corresponding
//! adapter columns in a single forward-only pass. No gradients are computed
//! during unlearning.
//!
//! Module map:
//! - [`data`]: interaction logs, core filtering, forget/retain splits,
//!   synthetic corpus with a planted forget cluster, prompt templating
//! - [`model`]: adapter layers, forward pass with activation capture,
//!   SGD training, checkpoint round-trip
//! - [`signals`]: streaming masked activation statistics per side
//! - [`risk`]: contrastive gap, utility importance, quantization proxy,
//!   fused per-dimension risk scores
//! - [`attenuate`]: threshold selection, decay-law retention factors,
//!   column scaling, the one-shot unlearning entry point
//! - [`baselines`]: retraining, gradient ascent, preference-style descent,
//!   hard pruning
//! - [`eval`]: ranking metrics, forget/utility trade-off, distribution
//!   shift probes, throughput accounting, report serialization

pub mod attenuate;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod risk;
pub mod signals;
pub mod tensor;
pub mod tensorio;

pub use error::UcanError;

/// Shared numerical floor for denominators and normalizers.
pub const EPS: f64 = 1e-8;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, UcanError>;
