//! Elastic sketch counters with closed-form tuning of the eviction threshold.
//!
//! The sketch splits memory between a heavy block (per-bucket elected item
//! with hit/competition counters) and a Count-Min block absorbing everything
//! else. Under i.i.d. arrivals the long-run behavior of each bucket is an
//! absorbing Markov chain; [`analysis`] evaluates the closed-form election
//! probabilities and the absorbed mass g, [`tuning`] selects the eviction
//! threshold from the finite candidate set that provably contains the
//! optimum, and [`sim`] provides the simulation harness and brute-force
//! chain oracles that validate the formulas.
//!
//! Everything randomized derives from explicit 64-bit seeds (see [`hash`]),
//! so runs replay bit-identically.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod hash;
pub mod numeric;
pub mod sim;
pub mod sketch;
pub mod stream;
pub mod tuning;

pub use error::{Error, Result};
