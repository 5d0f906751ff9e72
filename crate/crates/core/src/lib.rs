//! Inverse reinforcement learning on a one-level limit order book.
//!
//! The crate builds the exact transition tensor of a small order-book MDP,
//! generates demonstrations from a maximum causal entropy expert, recovers the
//! expert's reward with linear MaxEnt IRL, GP-based IRL and a two-step
//! Bayesian neural network method, and scores each by expected value
//! difference.

pub mod error;
pub mod numerics;
pub mod env;
pub mod solver;
pub mod demos;
pub mod maxent;
pub mod gpirl;
pub mod bnn;
pub mod experiment;

pub use error::{Error, Result};
