//! Galerkin/pseudospectral simulation of the 2D stochastic Navier-Stokes
//! vorticity equation on the torus, driven by a time-periodic force and
//! degenerate additive noise, plus the numerical experiments around it.

pub mod bracket;
pub mod dynamics;
pub mod ergodic;
pub mod error;
pub mod exec;
pub mod io;
pub mod malliavin;
pub mod regime;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(test)]
mod proptests;
