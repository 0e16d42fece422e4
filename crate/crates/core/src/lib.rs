//! Robust nearest-neighbor-prototype (RNNP) few-shot classification with
//! noisy support labels, evaluated entirely in embedding space.
//!
//! The crate is organised bottom-up:
//!
//! - [`vecmath`]: feature vectors and distances
//! - [`episodes`]: embedding pools, episode sampling, label corruption
//! - [`nnp`]: class-mean prototypes and softmax-distance classification
//! - [`rnnp`]: hybrid features, per-query soft k-means refinement, rectified labels
//! - [`datagen`]: synthetic Gaussian mixtures, Bayes oracle, CSV/JSONL I/O
//! - [`metrics`]: accuracy, 95% confidence intervals, paired comparison
//! - [`harness`]: experiment configs, sweeps and report files

pub mod datagen;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nnp;
pub mod rnnp;
pub mod vecmath;

pub use episodes::{ClassId, CorruptionSpec, EmbeddingSet, Episode};
pub use error::{Result, RnnpError};
pub use nnp::{ClassProbabilities, LabelSource, PrototypeSet};
pub use rnnp::{ClusteringMode, HybridLabeling, HybridSource, RefinementTrace, RnnpConfig};
pub use vecmath::{FeatureVec, Metric};
