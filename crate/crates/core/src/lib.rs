//! Group-robust classification over frozen embedding vectors.
//!
//! The crate trains and evaluates classifiers on top of precomputed sample
//! and class embeddings: zero-shot nearest-class-embedding prediction, linear
//! probes, ERM adapters, and contrastive adapters trained with hard-negative
//! supervised contrastive batches. Evaluation is reported per
//! (class, group) cell so that worst-group accuracy and the robustness gap
//! are first-class outputs.

pub mod adapter;
pub mod baselines;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod numerics;
pub mod presets;
pub mod sampling;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use dataio::{EmbeddingBundle, ShiftKind, ShiftSpec, Split};
pub use numerics::{Matrix, Rng};
