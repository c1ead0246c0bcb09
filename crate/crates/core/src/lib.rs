//! Request forecasting and learned coded cache placement for multi-cell
//! wireless caching networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`net_model`]: topology, per-bit delays, coded delivery delay and the
//!   network cost.
//! - [`trace`]: request traces, CSV interchange and a synthetic generator.
//! - [`tensor_nn`]: a small dense/LSTM network engine with exact gradients
//!   and Adam.
//! - [`predictor`]: the clustering + LSTM online request forecaster and its
//!   baselines.
//! - [`per_slot`]: the convex per-slot placement problem, solved as an
//!   epigraph LP.
//! - [`agent`]: the actor-critic placement policy with supervised
//!   pre-training.
//! - [`harness`]: configuration, seeding, experiments and CSV output.
//!
//! The guide in `book/` walks through each layer; its code listings are
//! compiled and run as doctests of this crate.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod error;
pub mod harness;
pub mod net_model;
pub mod per_slot;
pub mod predictor;
pub mod replay;
pub mod rng;
pub mod tensor_nn;
pub mod trace;

pub use error::{Error, Result};

// The guide's listings run as doctests under `cargo test`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/per_slot.md")]
    mod per_slot {}
    #[doc = include_str!("../../../book/src/agent.md")]
    mod agent {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
