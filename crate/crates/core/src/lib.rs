//! Discriminative constrained optimization for binary-reward policy learning.
//!
//! The crate works with tabular autoregressive softmax policies small enough
//! that every sequence can be enumerated. That makes success probabilities,
//! KL divergences and objective gradients checkable against brute force.
//!
//! Module map:
//!
//! - [`policy`]: the tabular policy, sampling, log-probabilities and score
//!   gradients, plus its checkpoint format.
//! - [`tasks`]: synthetic verifiable questions, rollout groups and the exact
//!   success-probability oracle.
//! - [`objectives`]: advantages, clipping, scoring functions and the training
//!   objectives (GRPO, Dr. GRPO, DAPO, GPG, TRPA, DisCO-b, DisCO) with exact
//!   gradients.
//! - [`decomposition`]: question-level weights and the weighted
//!   discriminative form of the group-relative objectives.
//! - [`constraint`]: the KL estimator and the squared-hinge trust-region
//!   penalty.
//! - [`trainer`]: the training loop with AdamW and per-step metrics.
//! - [`gradcheck`]: finite-difference verification of every gradient.

pub mod constraint;
pub mod decomposition;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod policy;
pub mod tasks;
pub mod trainer;

pub use constraint::{KlMode, TrustRegionSpec};
pub use decomposition::Method;
pub use error::{DiscoError, Result};
pub use objectives::{GradientVector, ObjectiveKind, ObjectiveSpec, Policies, ScoringKind};
pub use policy::{PolicyParams, Rollout, TokenSequence};
pub use tasks::{Question, RolloutGroup};
pub use trainer::{MetricsRecord, OptimizerState, TrainConfig};
