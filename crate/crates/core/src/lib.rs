//! Adaptive training pipeline for small classifiers.
//!
//! The crate bundles everything a desk-scale training run needs: dense
//! tensors with analytic backprop for a few reference models, dataset
//! ingestion and synthetic generators, AugMix-style augmentation,
//! classification losses (cross-entropy, AM-Softmax, the mutual-learning
//! pair objective), SGD/SAM optimizers with no-bias-decay grouping, a
//! plateau scheduler with forced decay and early stopping, initial
//! learning-rate estimators (range test, grid search, TPE with median
//! pruning), and ranking-aware evaluation (top-k, mAP).
//!
//! All randomness flows through [`rng::SeededRng`]; identical seeds and
//! configs reproduce runs bit for bit.

pub mod augment;
pub mod control;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod search;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
