//! Simulation and numerical verification toolkit for branching particle
//! systems on N urns arranged around the unit torus.
//!
//! The library has three legs that check each other:
//!
//! * an exact event-driven simulator of the jump process ([`sim`]),
//! * the deterministic large-N limit: density evolution, fluctuation
//!   variance, and hitting times ([`limit`]),
//! * the exact finite-N moment ODEs, closing mean and second moments into
//!   a linear system with no sampling error ([`moments`]).
//!
//! [`stats`] runs replica ensembles against the predictions, and the
//! `urnlab` binary exposes everything behind a config-driven CLI.
//!
//! Models are JSON files holding kernel expressions in `u` and `v`
//! ([`model`], [`expr`]); all randomness derives from a single master
//! seed ([`rng`]), making every run reproducible byte for byte.

pub mod alias;
pub mod cli;
pub mod error;
pub mod expr;
pub mod fenwick;
pub mod grid;
pub mod limit;
pub mod model;
pub mod moments;
pub mod ode;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
