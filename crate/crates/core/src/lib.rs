//! Query-adaptive trust-region policy optimization on enumerable tabular
//! autoregressive policies.
//!
//! The crate is organised around the per-query KL-constrained update:
//!
//! * [`dual`] solves the scalar dual problem for one reward group and emits
//!   the dual-derived advantages.
//! * [`policy`] provides the tabular softmax policy that stands in for a
//!   language model, with exact enumeration, ratios, KL and entropy.
//! * [`objectives`] implements the QUATRO, GRPO and GSPO losses with
//!   analytic gradients.
//! * [`trainer`] runs the rollout / dual-solve / inner-update loop.
//! * [`env`] defines synthetic sequence-reward tasks.
//! * [`metrics`] holds Pass@k, UCC@k, similarity clustering and flip rates.
//! * [`verify`] bundles the cross-module invariant checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dual;
pub mod env;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod seed;
pub mod trainer;
pub mod verify;

pub use dual::{dual_objective, solve_dual, DualSolution, RewardGroup, TrustRegionConfig};
pub use env::{EnvKind, SyntheticEnv};
pub use error::{Error, Result};
pub use objectives::{Batch, ClipConfig, KlEstimator, LossReport, QuatroConfig};
pub use optim::{OptimizerKind, OptimizerState};
pub use policy::{QueryId, SamplingConfig, TabularPolicy, Trajectory};
pub use trainer::{Algorithm, RunRecord, RunStatus, StepRow, TrainConfig, Trainer};
