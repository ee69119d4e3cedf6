//! End-to-end calibrated sequential recommendation.
//!
//! The crate provides, bottom-up:
//!
//! - [`catalog`]: item/attribute universes and the per-item attribute
//!   indicator rows everything else consumes.
//! - [`ingest`]: interaction-log parsing, k-core filtering, leave-one-out
//!   splitting with prefix augmentation.
//! - [`distribution`]: preference distributions, their soft/diversity/mask
//!   transforms, and the smoothed KL metric.
//! - [`tensor`]: a reverse-mode differentiation tape with finite-difference
//!   verification.
//! - [`encoder`]: a self-attentive sequence encoder with shared-embedding
//!   scoring and the accuracy/calibration losses.
//! - [`dacsr`]: the decoupled-aggregated model: two encoders, extractor
//!   nets with input residuals, aggregated scoring, three-term loss.
//! - [`trainer`]: Adam, pre-training, mini-batch training with
//!   validation-based selection, binary checkpoints.
//! - [`rerank`]: greedy calibrated re-ranking baselines over top-Z
//!   candidates.
//! - [`eval`]: accuracy/calibration/diversity metrics and the per-sequence
//!   latency harness.

pub mod catalog;
pub mod dacsr;
pub mod distribution;
pub mod encoder;
pub mod eval;
pub mod ingest;
pub mod rerank;
pub mod tensor;
pub mod trainer;

pub use catalog::{build_catalog, InteractionSequence, ItemCatalog};
pub use distribution::{AttributeDistribution, DistMode, ScoreVector};
pub use tensor::{Graph, ParamId, ParamSet, Shape, Tensor};
