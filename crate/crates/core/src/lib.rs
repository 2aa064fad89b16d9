//! Numerical differential-geometry and spinor toolkit: flux-integral masses
//! of asymptotically flat and circle/torus-compactified Riemannian metrics,
//! plus verification of the spinor identities behind them.
//!
//! The crate is organized around closed-form model metrics ([`models`]),
//! curvature and frame machinery ([`geometry`]), a concrete Clifford
//! representation ([`clifford`]), spin connections and approximate parallel
//! spinors ([`spin`]), shell quadrature and mass extrapolation ([`mass`]),
//! and a deterministic report-producing front end ([`cli`]).

pub mod clifford;
pub mod cli;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod mass;
pub mod models;
pub mod spin;

pub use error::{Error, Result};
