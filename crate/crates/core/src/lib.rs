//! Delay-optimal transmission scheduling over Markov channels under an
//! average-power budget.
//!
//! A transmitter drains a finite FIFO queue of Bernoulli arrivals over an
//! S-state ergodic Markov channel, paying a state-dependent power per
//! delivered packet. This crate computes the stationary policy minimizing
//! per-packet delay subject to a long-run power budget, by two independent
//! routes that cross-validate each other:
//!
//! - [`lp`]: a linear program over transmission occupancies, with the joint
//!   queue/channel distribution recovered through a linear map built from the
//!   steady-state balance equations;
//! - [`mdp`]: Lagrangian relaxation solved by discounted value iteration,
//!   whose optimal deterministic policies are per-state queue thresholds,
//!   calibrated and mixed to meet the budget exactly.
//!
//! [`eval`] evaluates any stationary policy in closed form (the shared
//! oracle, plus brute-force enumeration on small instances) and [`sim`] is a
//! reproducible seeded slot simulator including the greedy token-bucket
//! baseline.

pub mod eval;
pub mod lp;
pub mod markov;
pub mod mdp;
pub mod model;
pub mod sim;

pub use model::{
    ChannelModel, ConfigError, EvalResult, JointDistribution, ModelError, PolicyError,
    PolicyTable, ProblemConfig, ThresholdPolicy,
};
