//! Expectation propagation for switching linear dynamical systems.
//!
//! The crate provides
//!
//! * exact Gaussian and conditional-Gaussian algebra ([`gaussian`], [`cg`]),
//! * the SLDS model, its chain potentials and a seeded instance generator
//!   ([`model`]),
//! * damped forward-backward expectation propagation, of which the first
//!   forward pass is the GPB2 filter ([`engine`]),
//! * the Bethe free energy, its dual and a convergent double-loop minimizer
//!   together with saddle-point Hessian diagnostics ([`free_energy`]),
//! * exact posterior beliefs by enumerating switch paths ([`oracle`]).

pub mod cg;
pub mod engine;
pub mod error;
pub mod free_energy;
pub mod gaussian;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
