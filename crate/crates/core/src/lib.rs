//! Risk-calibrated step routing between a cheap local policy and an expensive
//! teacher, built for synthetic perturbed POMDPs.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches files,
//! threads, or the command line lives in the companion `riskroute` crate.
//!
//! Pipeline order:
//!
//! 1. [`policy::collect_teacher_trajectories`] builds the clean + perturbed pool.
//! 2. [`policy::train_bc`] clones the teacher on the episode-success subset.
//! 3. [`distill::build_preferences`] ranks BC candidates into preference pairs and
//!    [`distill::train_recovery`] refines the policy with DPO plus a JSD
//!    consistency penalty against a frozen reference.
//! 4. [`runtime::collect_routing_dataset`] labels every context of SLM-only rollouts
//!    with the episode outcome, and [`router::train_router`] fits the risk scorer
//!    under a CVaR-constrained Lagrangian with a Brier term.
//! 5. [`runtime::run_episode`] executes the budget-gated inference loop.
#![no_std]

extern crate alloc;

pub mod distill;
pub mod domain;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod math;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod router;
pub mod runtime;
pub mod verifier;

pub use error::{Error, Result};
