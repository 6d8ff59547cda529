//! Quantum dynamics: sideband-cooling master equation and the moment
//! equations of a harmonic trap that is switched off over a finite time.

mod dense;
pub mod motional;
pub mod release;
pub mod rsc;

pub use motional::{laguerre, motional_element};
pub use release::{integrate_release, release_ratio, MomentState, ReleaseResult, RampProfile};
pub use rsc::{evolve_rsc, DensityMatrix, EvolveOptions, RscParams, RscSystem, RscTrajectory};
