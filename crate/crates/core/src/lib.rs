//! Classical and semiclassical dynamics of the Dicke model (one large spin
//! coupled to one oscillator mode), plus the kicked-top map as its
//! discrete-time analogue.
//!
//! The library covers four layers:
//!
//! * phase-space model: canonical coordinates `(I, psi, c, phi)`, the scalar
//!   energy, and coordinate charts ([`model`]);
//! * flow: Hamiltonian drift, 1/j-corrected Fokker-Planck drift, analytic
//!   Jacobian, and the chiral quantum diffusion matrix ([`dynamics`]),
//!   integrated adaptively with dense output and event detection
//!   ([`integrate`]);
//! * diagnostics: Lyapunov spectra, covariant stable/unstable frames,
//!   Poincare scans ([`chaos`]), and the projected stable-direction variance
//!   that exhibits quantum smoothing ([`qdiff`]);
//! * statistics: energy-shell geometry, photon-number bounds and moments
//!   ([`shell`]), and kicked-top equilibration ([`kickedtop`]).
//!
//! All internal dynamics run in units with `omega0 = 1`; energies are the
//! dimensionless `eps = h / omega0` and times carry `1/omega0`.

pub mod chaos;
pub mod dynamics;
pub mod error;
pub mod integrate;
pub mod kickedtop;
pub mod linalg;
pub mod model;
pub mod qdiff;
pub mod shell;

pub use error::{Error, Result};
pub use model::{BlochVector, CanonicalState, ModelParams, StereoState};
