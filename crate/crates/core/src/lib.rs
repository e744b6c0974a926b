//! Desk-scale federated learning simulator for globally imbalanced,
//! locally agglomerated data.
//!
//! The crate trains a small fully-connected classifier across simulated
//! clients and calibrates it against class imbalance on two fronts: the
//! feature extractor through intra-client contrastive learning with a
//! prior-weighted temperature and inter-client contrastive learning against
//! shared class prototypes, and the classifier head through
//! difficulty-aware logit adjustment driven by per-class counts and loss
//! statistics aggregated each round (optionally under additively
//! homomorphic encryption). Baseline modes (plain FedAvg, quantity-only
//! logit adjustment, and partial stacks) are included so ablation trends
//! can be reproduced on synthetic data.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`optim`]: dense f64 math with reverse-mode
//!   gradients and the two optimizers used for local training.
//! - [`data`]: synthetic blob datasets, exponential long-tail subsampling,
//!   CSV ingestion, and two-view augmentation.
//! - [`partition`]: Dirichlet client splits, the doubly-imbalanced split
//!   with agglomeration, and imbalance/concentration metrics.
//! - [`model`]: extractor / projection head / linear classifier bundle and
//!   class prototype derivation.
//! - [`losses`]: the contrastive and logit-adjusted objectives.
//! - [`secureagg`]: Paillier-style encryption of per-class statistics.
//! - [`federation`]: round orchestration, local training, FedAvg.
//! - [`eval`]: balanced accuracy, communication efficiency, reports.
//! - [`config`]: TOML experiment configuration.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod secureagg;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
