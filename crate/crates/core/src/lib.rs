//! Counterfactual outcome estimation for longitudinal data by nearest-neighbour
//! matching in a learned latent space, with a doubly-robust correction.
//!
//! The pipeline turns each outcome record's history into multi-scale window
//! statistics ([`history`]), embeds them ([`features`], [`encoder`]), indexes
//! the latent states with p-stable hashing ([`lsh`]) and evaluates
//! `θ̂(a) = mean over neighbours of Q̂ + 1(A = a)/ê(a|z)·(Y − Q̂)` ([`estimator`]).
//! [`synthgen`] provides cohorts whose true counterfactual means are known, and
//! [`eval`] scores estimates against them.

pub mod commands;
pub mod config;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod history;
pub mod latent;
pub mod lsh;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};
