//! Exact and Monte Carlo tools for nearest-neighbour random walk in a
//! space-time i.i.d. product environment.

pub mod conditioned;
pub mod cramer;
pub mod environment;
pub mod htransform;
pub mod intersection;
pub mod error;
pub mod lattice;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
