//! Multi-level Monte Carlo natural actor-critic (MLMC-NAC) for average-reward
//! reinforcement learning, plus a dense exact oracle for small tabular MDPs.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: tabular MDPs, ergodic instance generators, critic feature maps
//!   and the JSON file format.
//! - [`policy`]: differentiable softmax policy classes (scores, sampling,
//!   actor update).
//! - [`oracle`]: ground truth by dense linear algebra: stationary
//!   distributions, gain, differential values, Fisher matrix, exact natural
//!   gradient, TD fixed point, mixing time and the assumption constants.
//! - [`mlmc`]: geometric level draws, trajectory collection with state
//!   continuation, the per-transition critic/NPG statistics and MLMC assembly.
//! - [`linrec`]: the generic stochastic linear recursion both inner loops
//!   reduce to, with synthetic validation suites.
//! - [`actor_critic`]: the critic and NPG subroutines, hyperparameter
//!   derivation and the outer loop.
//! - [`harness`]: experiment configs, seeded replication, CSV traces, rate
//!   fitting and validation reports used by the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor_critic;
pub mod error;
pub mod harness;
pub mod linrec;
pub mod mdp;
pub mod mlmc;
pub mod oracle;
pub mod policy;
pub mod rng;

pub use actor_critic::{
    critic_subroutine, derive_hyperparameters, mlmc_nac, npg_subroutine, CriticState,
    EpochRecord, HyperParams, Overrides, RunOptions, RunTrace,
};
pub use error::{Error, Result};
pub use mdp::{FeatureMap, TabularMdp, Transition};
pub use mlmc::{LevelDraw, MlmcEstimate};
pub use oracle::{AssumptionReport, PolicyEvaluation};
pub use policy::{PolicyClass, PolicyParams};
pub use rng::RngStream;
