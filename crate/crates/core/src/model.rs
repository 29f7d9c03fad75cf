//! Core types: model parameters, canonical phase-space coordinates, Bloch
//! and stereographic views, and the scalar energy function.
//!
//! Internally everything runs in units with `omega0 = 1`: the drift and
//! diffusion consume only the dimensionless pair `(nu, gamma)` and the spin
//! size `j`, times carry `1/omega0`, and energies are `eps = h / omega0`.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// Largest |z| the stereographic chart accepts before declaring the south
/// pole unreachable (|z|^2 must stay finite).
const STEREO_POLE_LIMIT: f64 = 1e150;

/// Slack allowed when clamping |c| <= 1 on states coming out of dense
/// output interpolation.
pub(crate) const C_CLAMP_TOL: f64 = 1e-12;

/// Physical model parameters. Stored as given; every dynamical quantity is
/// derived from the dimensionless `nu()`, `gamma()` and `j`, so the stored
/// fields can never go stale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Spin precession frequency (rad/time).
    pub omega0: f64,
    /// Oscillator frequency (rad/time).
    pub omega: f64,
    /// Spin-oscillator coupling (rad/time).
    pub g: f64,
    /// Spin quantum number, > 0. Enters only 1/j diffusion prefactors and
    /// the (1 + 1/j) drift corrections.
    pub j: f64,
}

impl ModelParams {
    pub fn new(omega0: f64, omega: f64, g: f64, j: f64) -> Result<Self> {
        let all_finite =
            omega0.is_finite() && omega.is_finite() && g.is_finite() && j.is_finite();
        if !all_finite || omega0 <= 0.0 || omega <= 0.0 || g < 0.0 || j <= 0.0 {
            return Err(Error::Validation(format!(
                "need omega0 > 0, omega > 0, g >= 0, j > 0; got ({omega0}, {omega}, {g}, {j})"
            )));
        }
        Ok(Self { omega0, omega, g, j })
    }

    /// Parameters from the dimensionless coupling `gamma = g/g_c` and
    /// frequency ratio `nu = omega/omega0`, in `omega0 = 1` units.
    pub fn from_dimensionless(gamma: f64, nu: f64, j: f64) -> Result<Self> {
        if !(gamma.is_finite() && nu.is_finite()) || gamma < 0.0 || nu <= 0.0 {
            return Err(Error::Validation(format!(
                "need gamma >= 0, nu > 0; got ({gamma}, {nu})"
            )));
        }
        let g_c = nu.sqrt() / 2.0;
        Self::new(1.0, nu, gamma * g_c, j)
    }

    /// Critical coupling of the superradiant transition.
    pub fn g_c(&self) -> f64 {
        (self.omega * self.omega0).sqrt() / 2.0
    }

    /// Dimensionless coupling g/g_c.
    pub fn gamma(&self) -> f64 {
        self.g / self.g_c()
    }

    /// Frequency ratio omega/omega0.
    pub fn nu(&self) -> f64 {
        self.omega / self.omega0
    }

    /// Ground-state energy of the classical model: -1 below the transition,
    /// -(gamma^2 + gamma^-2)/2 above it.
    pub fn ground_energy(&self) -> f64 {
        let gamma = self.gamma();
        if gamma <= 1.0 {
            -1.0
        } else {
            -(gamma * gamma + 1.0 / (gamma * gamma)) / 2.0
        }
    }
}

/// Reduce an angle to [0, 2*pi).
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Canonical phase-space point (I, psi, c = cos(theta), phi).
///
/// Angles are reduced to [0, 2*pi) on construction; integration keeps its
/// own unwrapped copies and reduces on output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalState {
    /// Scaled action I = <a^dag a>/j, >= 0.
    pub i: f64,
    /// Oscillator phase (rad).
    pub psi: f64,
    /// cos(theta) of the spin, in [-1, 1].
    pub c: f64,
    /// Spin azimuth (rad).
    pub phi: f64,
}

impl CanonicalState {
    pub fn new(i: f64, psi: f64, c: f64, phi: f64) -> Result<Self> {
        let all_finite = i.is_finite() && psi.is_finite() && c.is_finite() && phi.is_finite();
        if !all_finite || i < 0.0 || c.abs() > 1.0 {
            return Err(Error::Validation(format!(
                "need I >= 0, |c| <= 1, finite angles; got ({i}, {psi}, {c}, {phi})"
            )));
        }
        Ok(Self {
            i,
            psi: wrap_angle(psi),
            c,
            phi: wrap_angle(phi),
        })
    }

    /// State from a raw integration vector: wraps angles and clamps |c|
    /// within the dense-output tolerance.
    pub(crate) fn from_raw(y: &[f64; 4]) -> Self {
        debug_assert!(y[0] >= -C_CLAMP_TOL && y[2].abs() <= 1.0 + C_CLAMP_TOL);
        Self {
            i: y[0].max(0.0),
            psi: wrap_angle(y[1]),
            c: y[2].clamp(-1.0, 1.0),
            phi: wrap_angle(y[3]),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.i, self.psi, self.c, self.phi]
    }

    pub fn bloch(&self) -> BlochVector {
        bloch_from_canonical(self.c, self.phi)
    }
}

/// Unit angular-momentum vector of the spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochVector {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl BlochVector {
    pub fn norm(&self) -> f64 {
        (self.lx * self.lx + self.ly * self.ly + self.lz * self.lz).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lx, self.ly, self.lz]
    }
}

/// l = (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta)).
pub fn bloch_from_canonical(c: f64, phi: f64) -> BlochVector {
    let s = (1.0 - c * c).max(0.0).sqrt();
    BlochVector {
        lx: s * phi.cos(),
        ly: s * phi.sin(),
        lz: c,
    }
}

/// Stereographic chart: complex spin coordinate z (projecting from the
/// south pole) and complex oscillator amplitude alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoState {
    pub z: Complex64,
    pub alpha: Complex64,
}

/// Chart change (z, alpha) -> (I, psi, c, phi):
/// c = (1-|z|^2)/(1+|z|^2), phi = arg z, I = |alpha|^2/j, psi = arg alpha.
pub fn canonical_from_stereo(s: &StereoState, params: &ModelParams) -> Result<CanonicalState> {
    let zn = s.z.norm();
    if !zn.is_finite() || zn > STEREO_POLE_LIMIT {
        return Err(Error::Pole { abs_z: zn });
    }
    let z2 = zn * zn;
    let c = (1.0 - z2) / (1.0 + z2);
    let i = s.alpha.norm_sqr() / params.j;
    CanonicalState::new(i, s.alpha.arg(), c, s.z.arg())
}

/// Inverse chart change; fails at the south pole c = -1 where |z| diverges.
pub fn stereo_from_canonical(state: &CanonicalState, params: &ModelParams) -> Result<StereoState> {
    let denom = 1.0 + state.c;
    if denom < 1e-300 {
        return Err(Error::Pole { abs_z: f64::INFINITY });
    }
    let r = ((1.0 - state.c) / denom).sqrt();
    let a = (params.j * state.i).sqrt();
    Ok(StereoState {
        z: Complex64::from_polar(r, state.phi),
        alpha: Complex64::from_polar(a, state.psi),
    })
}

/// Dimensionless energy eps = h/omega0 of a phase-space point:
/// eps = c + nu I + gamma sqrt(2 nu I) cos(psi) sqrt(1-c^2) cos(phi).
pub fn energy(state: &CanonicalState, params: &ModelParams) -> f64 {
    energy_raw(&state.as_array(), params.nu(), params.gamma())
}

pub(crate) fn energy_raw(y: &[f64; 4], nu: f64, gamma: f64) -> f64 {
    let [i, psi, c, phi] = *y;
    let s = (1.0 - c * c).max(0.0).sqrt();
    c + nu * i + gamma * (2.0 * nu * i).max(0.0).sqrt() * psi.cos() * s * phi.cos()
}

/// Gradient of the energy in coordinate order (I, psi, c, phi).
///
/// Requires I > 0 and |c| < 1 (the sqrt(I) and cot(theta) factors).
pub fn energy_gradient(state: &CanonicalState, params: &ModelParams) -> Result<[f64; 4]> {
    let (nu, gamma) = (params.nu(), params.gamma());
    let CanonicalState { i, psi, c, phi } = *state;
    if i <= 0.0 {
        return Err(Error::Singularity { what: "I = 0 in energy gradient" });
    }
    if 1.0 - c.abs() <= 0.0 {
        return Err(Error::Singularity { what: "|c| = 1 in energy gradient" });
    }
    let s = (1.0 - c * c).sqrt();
    let u = gamma * (2.0 * nu * i).sqrt();
    let (cpsi, spsi) = (psi.cos(), psi.sin());
    let (cphi, sphi) = (phi.cos(), phi.sin());
    Ok([
        nu + gamma * (nu / (2.0 * i)).sqrt() * cpsi * s * cphi,
        -u * spsi * s * cphi,
        1.0 - u * cpsi * (c / s) * cphi,
        -u * cpsi * s * sphi,
    ])
}
