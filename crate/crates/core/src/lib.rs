//! Simulation of a single trapped ⁴⁰Ca⁺ ion whose fluorescence is collected by
//! two optical fibers embedded in the electrodes of an endcap trap.
//!
//! The crate is split along the physical pipeline:
//!
//! - [`atom`]: level scheme, laser drives and the rotating-frame Hamiltonian.
//! - [`dynamics`]: Lindblad master equation, steady state and the
//!   quantum-regression g²(τ).
//! - [`photostream`]: quantum-jump trajectories and the detector model that
//!   turns emissions into two time-tagged photon streams.
//! - [`correlator`]: start/stop TDC emulation and g²(τ) normalization.
//! - [`collection`]: fiber collection solid angle.
//! - [`trap`]: axisymmetric field solver, pseudopotential, secular
//!   frequencies, micromotion and stray-field analysis.
//! - [`spectroscopy`]: detuning scans and Lorentzian fits.

pub mod atom;
pub mod collection;
pub mod constants;
pub mod correlator;
pub mod dynamics;
mod error;
pub mod fit;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod photostream;
pub mod presets;
pub mod spectroscopy;
pub mod trap;

pub use error::{Error, Result};
