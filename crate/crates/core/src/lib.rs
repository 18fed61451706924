//! Deterministic simulator for split learning on heterogeneous devices.
//!
//! The crate models the whole pipeline in plain f64 arithmetic: layered
//! networks with reverse-mode gradients ([`nn`]), synthetic datasets and
//! counter-based random streams ([`data`], [`rng`]), a sequential
//! split-learning protocol with noise injection at the cut ([`protocol`]),
//! energy and privacy-leakage profiling ([`energy`], [`profiler`]),
//! input-reconstruction and membership-inference attacks ([`attack`]), and a
//! bi-level search for per-client split points and noise levels ([`bilevel`]).
//!
//! Everything is deterministic given a seed: random streams are keyed by
//! purpose rather than drawn from shared state, so identical configurations
//! reproduce identical results byte for byte.

pub mod attack;
pub mod bilevel;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod profiler;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
