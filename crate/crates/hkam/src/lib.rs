//! Spectral numerics for hyperbolic KAM theory at a simple resonance.
//!
//! The crate is organized as a pipeline:
//!
//! - [`series`]: truncated Fourier series and momentum jets;
//! - [`chart`]: Chebyshev × Fourier fields on a chart around the torus;
//! - [`separatrix`]: separatrix function, energy-time map and strip widths;
//! - [`homological`]: small-divisor solvers for the linearized equations;
//! - [`normalform`]: lattice preliminaries and the explicit normal-form chain;
//! - [`kam`]: the Newton iteration producing generating functions of whiskers;
//! - [`splitting`]: splitting potential, flow-box frame and exponential bounds;
//! - [`cli`]: experiment configuration and report emission.

pub mod chart;
pub mod error;
pub mod homological;
pub mod kam;
pub mod normalform;
pub mod separatrix;
pub mod series;
pub mod splitting;
pub mod cli;

pub use error::{Error, Result};
