//! Sample-based ensemble observers.
//!
//! Reconstructs and tracks the state distribution of a population of identical
//! dynamical systems from anonymous output samples alone. Continuous ensembles
//! are corrected by randomized per-particle moves drawn from 1D optimal
//! transport plans between output histograms; discrete ensembles by sorting
//! assignment and hyperplane projections.

pub mod correction;
pub mod discrete;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod histogram;
pub mod metrics;
pub mod observer;
pub mod rng;
pub mod transport;

pub mod cli;

pub use error::{Error, Result};
