//! Training-free merging of independently adapted checkpoints.
//!
//! The crate covers the full merging workflow on a neutral checkpoint
//! container: parameter interpolation and convex combination
//! ([`merge`]), pooling of batch-norm running statistics ([`buffers`]),
//! permutation alignment by weight matching ([`align`], [`lap`]), linear
//! connectivity sweeps ([`probe`]), evaluation metrics ([`metrics`]), and a
//! small dense+BN+ReLU runtime ([`runtime`]) for producing and scoring toy
//! checkpoints in seeded end-to-end scenarios ([`experiments`]).

pub mod align;
pub mod buffers;
pub mod cli;
pub mod container;
pub mod error;
pub mod experiments;
pub mod lap;
pub mod matrix;
pub mod merge;
pub mod metrics;
pub mod probe;
pub mod runtime;

pub use buffers::{merge_bn_many, merge_bn_pair, BnStats, BufferPolicy};
pub use container::{
    inspect, load_checkpoint, save_checkpoint, validate_compatibility, Checkpoint, CompatReport, DType, Role,
    TensorData, TensorEntry,
};
pub use error::{Error, Result};
pub use lap::{solve_lap, Permutation};
pub use merge::{interpolate, midpoint, prefix_merge, weighted_merge, MergeSpec, Weights};
pub use metrics::{accuracy, confusion, harmonic_mean, miou, ConfusionMatrix, DomainScores};
