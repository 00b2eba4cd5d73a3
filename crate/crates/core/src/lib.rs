//! Capsule subspace projection heads at desk scale.
//!
//! A classifier head that learns one linear subspace per class and scores a
//! feature vector by the Euclidean length of its orthogonal projection onto
//! each subspace. The crate provides the projection math with exact analytical
//! gradients, the hyper-power iteration that keeps the Gram-inverse
//! normalization matrix current during training, two baseline heads for
//! comparison, a small manually-differentiated MLP backbone, synthetic and
//! file-based datasets, and a deterministic SGD training harness.
//!
//! Layout:
//!
//! - [`linalg`] — dense f64 matrices/vectors, SPD inverse, inverse square root
//! - [`capsule`] — one class subspace: projection, length gradient, hyper-power step
//! - [`heads`] — capsule head plus linear-softmax and grouped-neuron baselines
//! - [`backbone`] — MLP feature extractor with manual forward/backward
//! - [`data`] — synthetic generators, CSV and IDX loaders, stratified splits
//! - [`train`] — SGD with Nesterov momentum, epoch records, head comparisons
//! - [`model`] — backbone+head bundle and its binary save/load format
//! - [`gradcheck`] — finite-difference verification suites
//! - [`bench`] — exact-vs-hyper-power sigma maintenance benchmark
//! - [`seed`] — named-stream seed derivation so every component is reproducible
//!
//! All numeric state is immutable `f64` data; operations are pure functions,
//! so values can be shared and sent freely between threads. Parameter updates
//! happen at explicit synchronization points in the trainer.

pub mod backbone;
pub mod bench;
pub mod capsule;
pub mod data;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod train;

pub use capsule::{CapsuleSubspace, ProjectionResult, SigmaMode};
pub use heads::{CapsuleHead, GroupNeuronHead, Head, HeadKind, HeadOutput, LinearHead};
pub use linalg::{Matrix, Vector};
pub use model::Model;
pub use train::{RunRecord, TrainConfig};
