//! Simulation library for differentially private federated learning (DP-FL)
//! under stealthy noise-poisoning attacks.
//!
//! The library models a synchronous federated averaging loop in which a
//! server aggregates median-norm-clipped client updates and perturbs the
//! aggregate with calibrated Gaussian noise. On top of that loop it provides:
//!
//! - an attacker that swaps the benign zero-mean noise source for a
//!   mean-shifted Gaussian whose KL divergence from the benign source is
//!   pinned to a stealth budget ([`attack`]),
//! - a tabular Q-learning agent that picks the per-round privacy loss and a
//!   baseline-deviation detector that flags poisoned rounds ([`rl`]),
//! - dataset ingestion (MNIST IDX, household power consumption) plus
//!   deterministic synthetic generators and non-IID partitioning ([`data`]).
//!
//! Everything is driven by explicit seeds: a master seed fans out into named
//! substreams (initialization, client selection, aggregation noise, agent
//! exploration) so a fixed configuration reproduces bit-identical histories.

pub mod attack;
pub mod data;
pub mod dp;
pub mod error;
pub mod fl;
pub mod matrix;
pub mod nn;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
