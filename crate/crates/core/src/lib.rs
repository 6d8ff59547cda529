//! Simulation and analysis of single-atom wave-packet expansion in a pinned
//! triangular optical lattice.
//!
//! The crate is organised bottom-up:
//!
//! - [`lattice`] — triangular lattice geometry and trap frequencies
//! - [`wavepacket`] — thermal Gaussian wave packets, expansion and pinning
//! - [`imager`] — synthetic fluorescence frames
//! - [`reconstruct`] — clustering and structure-factor lattice fitting
//! - [`classifier`] — 81-50-25-12-1 perceptron for site occupancy
//! - [`assign`] — LAP solver and K-best (Murty) ranking
//! - [`estimate`] — self-consistent likelihood fit of the displacement model
//! - [`qdyn`] — sideband-cooling master equation and release moment equations
//! - [`pipeline`] — end-to-end drivers used by the command-line tool

pub mod assign;
pub mod classifier;
pub mod config;
pub mod error;
pub mod estimate;
pub mod imager;
pub mod io;
pub mod lattice;
pub mod manifest;
pub mod par;
pub mod pipeline;
pub mod qdyn;
pub mod reconstruct;
pub mod rng;
pub mod wavepacket;

pub use error::{Error, Result};
