//! Right-hand sides of the flow: Hamiltonian drift, 1/j-corrected
//! Fokker-Planck drift, analytic drift Jacobian, and the chiral quantum
//! diffusion matrix with the Q/P sign convention.
//!
//! Coordinate order is (I, psi, c, phi) everywhere; rates are in omega0
//! units.

use crate::error::{Error, Result};
use crate::linalg::Mat4;
use crate::model::{CanonicalState, ModelParams};

/// Guard below which the action is treated as singular (1/sqrt(I) terms).
pub const I_FLOOR: f64 = 1e-10;
/// Guard on 1 - |c| for the cot(theta) and 1/(1 - c^2) factors.
pub const C_GUARD: f64 = 1e-9;

/// Time derivatives of the canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftVector {
    pub di: f64,
    pub dpsi: f64,
    pub dc: f64,
    pub dphi: f64,
}

impl DriftVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.di, self.dpsi, self.dc, self.dphi]
    }
}

/// Which quasiprobability the diffusion matrix evolves. P flips the overall
/// diffusion sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuasiprobKind {
    Q,
    P,
}

/// Symmetric 4x4 diffusion matrix over (I, psi, c, phi), carrying the
/// explicit 1/j scale. The diagonal 2x2 blocks vanish identically, so the
/// spectrum comes in plus/minus pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionMatrix4 {
    pub m: Mat4,
}

impl DiffusionMatrix4 {
    /// Eigenvalues ascending with matching unit eigenvectors as rows.
    pub fn eigen(&self) -> ([f64; 4], Mat4) {
        crate::linalg::sym_eigen(&self.m)
    }
}

fn guard(y: &[f64; 4]) -> Result<()> {
    if !(y[0] >= I_FLOOR) {
        return Err(Error::Singularity { what: "action I below floor" });
    }
    if !(1.0 - y[2].abs() >= C_GUARD) {
        return Err(Error::Singularity { what: "|c| within guard of 1" });
    }
    Ok(())
}

/// Trig/coupling factors shared by the drift, Jacobian, and diffusion.
struct Factors {
    s: f64,
    spsi: f64,
    cpsi: f64,
    sphi: f64,
    cphi: f64,
    /// gamma * sqrt(2 nu I)
    u: f64,
    /// gamma * sqrt(nu / (2 I)) = u / (2 I)
    v: f64,
}

fn factors(y: &[f64; 4], nu: f64, gamma: f64) -> Factors {
    let [i, psi, c, phi] = *y;
    let s2 = 1.0 - c * c;
    let (spsi, cpsi) = psi.sin_cos();
    let (sphi, cphi) = phi.sin_cos();
    Factors {
        s: s2.sqrt(),
        spsi,
        cpsi,
        sphi,
        cphi,
        u: gamma * (2.0 * nu * i).sqrt(),
        v: gamma * (nu / (2.0 * i)).sqrt(),
    }
}

/// Drift with the coupling terms of dI and dpsi scaled by `k`; k = 1 is the
/// classical Hamiltonian field, k = 1 + 1/j the Fokker-Planck correction.
fn drift_scaled(y: &[f64; 4], nu: f64, gamma: f64, k: f64) -> Result<[f64; 4]> {
    guard(y)?;
    let f = factors(y, nu, gamma);
    let c = y[2];
    Ok([
        k * (-f.u * f.spsi * f.s * f.cphi),
        -nu + k * (-f.v * f.cpsi * f.s * f.cphi),
        f.u * f.cpsi * f.s * f.sphi,
        1.0 - f.u * f.cpsi * (c / f.s) * f.cphi,
    ])
}

pub(crate) fn drift_raw(y: &[f64; 4], nu: f64, gamma: f64) -> Result<[f64; 4]> {
    drift_scaled(y, nu, gamma, 1.0)
}

/// Classical Hamiltonian vector field.
pub fn classical_drift(state: &CanonicalState, params: &ModelParams) -> Result<DriftVector> {
    let d = drift_raw(&state.as_array(), params.nu(), params.gamma())?;
    Ok(DriftVector { di: d[0], dpsi: d[1], dc: d[2], dphi: d[3] })
}

/// Fokker-Planck drift: with `correction_on`, the oscillator coupling terms
/// carry the (1 + 1/j) factor; without it, identical to the classical field.
pub fn fp_drift(
    state: &CanonicalState,
    params: &ModelParams,
    correction_on: bool,
) -> Result<DriftVector> {
    let k = if correction_on { 1.0 + 1.0 / params.j } else { 1.0 };
    let d = drift_scaled(&state.as_array(), params.nu(), params.gamma(), k)?;
    Ok(DriftVector { di: d[0], dpsi: d[1], dc: d[2], dphi: d[3] })
}

pub(crate) fn jacobian_raw(y: &[f64; 4], nu: f64, gamma: f64) -> Result<Mat4> {
    guard(y)?;
    let f = factors(y, nu, gamma);
    let (i, c) = (y[0], y[2]);
    let Factors { s, spsi, cpsi, sphi, cphi, u, v, .. } = f;
    let cot = c / s;
    Ok([
        [
            -(u / (2.0 * i)) * spsi * s * cphi,
            -u * cpsi * s * cphi,
            u * spsi * cot * cphi,
            u * spsi * s * sphi,
        ],
        [
            (v / (2.0 * i)) * cpsi * s * cphi,
            v * spsi * s * cphi,
            v * cpsi * cot * cphi,
            v * cpsi * s * sphi,
        ],
        [
            (u / (2.0 * i)) * cpsi * s * sphi,
            -u * spsi * s * sphi,
            -u * cpsi * cot * sphi,
            u * cpsi * s * cphi,
        ],
        [
            -(u / (2.0 * i)) * cpsi * cot * cphi,
            u * spsi * cot * cphi,
            -u * cpsi * cphi / (s * s * s),
            u * cpsi * cot * sphi,
        ],
    ])
}

/// Analytic Jacobian of `classical_drift` over (I, psi, c, phi).
pub fn drift_jacobian(state: &CanonicalState, params: &ModelParams) -> Result<Mat4> {
    jacobian_raw(&state.as_array(), params.nu(), params.gamma())
}

pub(crate) fn diffusion_raw(
    y: &[f64; 4],
    nu: f64,
    gamma: f64,
    j: f64,
    kind: QuasiprobKind,
) -> Result<Mat4> {
    guard(y)?;
    let f = factors(y, nu, gamma);
    let (i, c) = (y[0], y[2]);
    let sign = match kind {
        QuasiprobKind::Q => 1.0,
        QuasiprobKind::P => -1.0,
    };
    // g/(j sqrt(2)) with g = gamma sqrt(nu)/2 in omega0 units.
    let pref = sign * gamma * nu.sqrt() / (2.0 * std::f64::consts::SQRT_2 * j);
    let a = -f.cpsi * f.sphi - c * f.spsi * f.cphi;
    let b = c * f.cpsi * f.cphi - f.spsi * f.sphi;
    let sqrt_i = i.sqrt();
    let row_i = pref * sqrt_i;
    let row_psi = pref / (2.0 * sqrt_i);
    // Column scales are the square roots of the coherent-state metric in
    // (c, phi), mirroring the oscillator row scales in (I, psi).
    let (col_c, col_phi) = (f.s, 1.0 / f.s);

    let d_ic = row_i * a * col_c;
    let d_iphi = row_i * b * col_phi;
    let d_psic = row_psi * -b * col_c;
    let d_psiphi = row_psi * a * col_phi;
    Ok([
        [0.0, 0.0, d_ic, d_iphi],
        [0.0, 0.0, d_psic, d_psiphi],
        [d_ic, d_psic, 0.0, 0.0],
        [d_iphi, d_psiphi, 0.0, 0.0],
    ])
}

/// Quantum diffusion matrix of the quasiprobability evolution.
pub fn diffusion_matrix(
    state: &CanonicalState,
    params: &ModelParams,
    kind: QuasiprobKind,
) -> Result<DiffusionMatrix4> {
    let m = diffusion_raw(&state.as_array(), params.nu(), params.gamma(), params.j, kind)?;
    Ok(DiffusionMatrix4 { m })
}

// Embedded representation (I, psi, lx, ly, lz): the spin lives on the unit
// sphere instead of the (c, phi) chart, so the flow has no coordinate
// singularity at the poles c = +/-1 where chaotic trajectories pile up.
// The spin precesses as l' = B x l about B = (G, 0, 1) with
// G = gamma sqrt(2 nu I) cos(psi), which reproduces the chart equations for
// c = lz, phi = atan2(ly, lx). The Euclidean metric restricted to the sphere
// is diag(1/(1-c^2), 1-c^2) in (c, phi) components, so tangent volumes (and
// with them exponent sums) match the chart exactly while individual vector
// norms differ by a bounded factor. Only the oscillator origin I = 0 keeps a
// guard.

fn guard5(y: &[f64; 5]) -> Result<()> {
    if !(y[0] >= I_FLOOR) {
        return Err(Error::Singularity { what: "action I below floor" });
    }
    Ok(())
}

pub(crate) fn embed(y: &[f64; 4]) -> [f64; 5] {
    let s = (1.0 - y[2] * y[2]).max(0.0).sqrt();
    [y[0], y[1], s * y[3].cos(), s * y[3].sin(), y[2]]
}

/// Chart view of an embedded state; phi comes back wrapped to (-pi, pi].
pub(crate) fn project5(y: &[f64; 5]) -> [f64; 4] {
    [y[0], y[1], y[4].clamp(-1.0, 1.0), y[3].atan2(y[2])]
}

pub(crate) fn energy5(y: &[f64; 5], nu: f64, gamma: f64) -> f64 {
    let u = gamma * (2.0 * nu * y[0].max(0.0)).sqrt();
    y[4] + nu * y[0] + u * y[1].cos() * y[2]
}

pub(crate) fn drift5(y: &[f64; 5], nu: f64, gamma: f64) -> Result<[f64; 5]> {
    guard5(y)?;
    let (i, psi) = (y[0], y[1]);
    let (lx, ly, lz) = (y[2], y[3], y[4]);
    let (spsi, cpsi) = psi.sin_cos();
    let u = gamma * (2.0 * nu * i).sqrt();
    let v = u / (2.0 * i);
    let g = u * cpsi;
    Ok([
        -u * spsi * lx,
        -nu - v * cpsi * lx,
        -ly,
        lx - g * lz,
        g * ly,
    ])
}

pub(crate) fn jacobian5(y: &[f64; 5], nu: f64, gamma: f64) -> Result<[[f64; 5]; 5]> {
    guard5(y)?;
    let (i, psi) = (y[0], y[1]);
    let (lx, ly, lz) = (y[2], y[3], y[4]);
    let (spsi, cpsi) = psi.sin_cos();
    let u = gamma * (2.0 * nu * i).sqrt();
    let v = u / (2.0 * i);
    let g = u * cpsi;
    Ok([
        [-v * spsi * lx, -u * cpsi * lx, -u * spsi, 0.0, 0.0],
        [v / (2.0 * i) * cpsi * lx, v * spsi * lx, -v * cpsi, 0.0, 0.0],
        [0.0, 0.0, 0.0, -1.0, 0.0],
        [-v * cpsi * lz, u * spsi * lz, 1.0, 0.0, -g],
        [v * cpsi * ly, -u * spsi * ly, 0.0, g, 0.0],
    ])
}

/// Push a chart tangent (dI, dpsi, dc, dphi) into the embedded space.
pub(crate) fn tangent_embed(y: &[f64; 4], v: &[f64; 4]) -> [f64; 5] {
    let l = embed(y);
    let rho2 = (l[2] * l[2] + l[3] * l[3]).max(C_GUARD * C_GUARD);
    let (dc, dphi) = (v[2], v[3]);
    [
        v[0],
        v[1],
        -l[4] * l[2] / rho2 * dc - l[3] * dphi,
        -l[4] * l[3] / rho2 * dc + l[2] * dphi,
        dc,
    ]
}

/// Chart components of an embedded tangent; fails inside the pole guard
/// where dphi is not defined.
pub(crate) fn tangent_project(y: &[f64; 5], w: &[f64; 5]) -> Result<[f64; 4]> {
    let rho2 = y[2] * y[2] + y[3] * y[3];
    if rho2 < C_GUARD * C_GUARD {
        return Err(Error::Singularity { what: "|c| within guard of 1" });
    }
    Ok([w[0], w[1], w[4], (y[2] * w[3] - y[3] * w[2]) / rho2])
}

/// Push a chart covector into the embedded space, so that its pairing with
/// any embedded tangent matches the chart pairing.
pub(crate) fn cotangent_embed(y: &[f64; 4], eta: &[f64; 4]) -> [f64; 5] {
    let l = embed(y);
    let rho2 = (l[2] * l[2] + l[3] * l[3]).max(C_GUARD * C_GUARD);
    [
        eta[0],
        eta[1],
        -l[3] / rho2 * eta[3],
        l[2] / rho2 * eta[3],
        eta[2],
    ]
}

/// Chart components of an embedded covector. The spin-radial co-direction
/// pairs to zero with every tangent, so it drops out here.
pub(crate) fn cotangent_project(y: &[f64; 5], h: &[f64; 5]) -> Result<[f64; 4]> {
    let rho2 = y[2] * y[2] + y[3] * y[3];
    if rho2 < C_GUARD * C_GUARD {
        return Err(Error::Singularity { what: "|c| within guard of 1" });
    }
    let radial = y[4] / rho2;
    Ok([
        h[0],
        h[1],
        h[4] - radial * (y[2] * h[2] + y[3] * h[3]),
        y[2] * h[3] - y[3] * h[2],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, mat_vec};
    use crate::model::{energy_gradient, energy_raw, TAU};
    use proptest::prelude::*;

    fn params(gamma: f64, nu: f64, j: f64) -> ModelParams {
        ModelParams::from_dimensionless(gamma, nu, j).unwrap()
    }

    fn state(i: f64, psi: f64, c: f64, phi: f64) -> CanonicalState {
        CanonicalState::new(i, psi, c, phi).unwrap()
    }

    #[test]
    fn decoupled_drift_is_free_precession() {
        let p = params(0.0, 1.8, 100.0);
        let d = classical_drift(&state(2.0, 1.0, 0.3, 4.4), &p).unwrap();
        assert_eq!(d.di, 0.0);
        assert_eq!(d.dpsi, -1.8);
        assert_eq!(d.dc, 0.0);
        assert_eq!(d.dphi, 1.0);
    }

    #[test]
    fn action_stationary_where_lx_vanishes() {
        let p = params(1.5, 1.0, 100.0);
        let d = classical_drift(&state(2.0, 0.7, 0.3, std::f64::consts::FRAC_PI_2), &p).unwrap();
        assert!(d.di.abs() < 1e-14);
    }

    /// Symplectic pairing: (dI, dpsi, dc, dphi) = (de/dpsi, -de/dI, -de/dphi, de/dc),
    /// with the gradient taken by central differences of the energy.
    #[test]
    fn drift_is_symplectic_gradient_of_energy() {
        let p = params(1.3, 0.9, 100.0);
        let cases = [
            state(0.7, 0.3, -0.4, 1.0),
            state(5.0, 2.8, 0.6, 3.9),
            state(0.2, 5.5, -0.85, 0.1),
            state(12.0, 4.1, 0.05, 2.2),
        ];
        let h = 1e-6;
        for s in cases {
            let d = classical_drift(&s, &p).unwrap().as_array();
            let mut grad = [0.0; 4];
            let mut y = s.as_array();
            for k in 0..4 {
                let y0 = y[k];
                y[k] = y0 + h;
                let ep = energy_raw(&y, p.nu(), p.gamma());
                y[k] = y0 - h;
                let em = energy_raw(&y, p.nu(), p.gamma());
                y[k] = y0;
                grad[k] = (ep - em) / (2.0 * h);
            }
            let expect = [grad[1], -grad[0], -grad[3], grad[2]];
            for k in 0..4 {
                let scale = expect[k].abs().max(1.0);
                assert!(
                    (d[k] - expect[k]).abs() < 1e-6 * scale,
                    "component {k}: drift {} vs symplectic fd {}",
                    d[k],
                    expect[k]
                );
            }
        }
    }

    #[test]
    fn fp_correction_doubles_coupling_at_j_one() {
        let p = params(1.5, 1.0, 1.0);
        let s = state(2.0, 0.9, 0.3, 5.1);
        let cl = classical_drift(&s, &p).unwrap();
        let fp = fp_drift(&s, &p, true).unwrap();
        assert_eq!(fp.di, 2.0 * cl.di);
        assert!((fp.dpsi + p.nu() - 2.0 * (cl.dpsi + p.nu())).abs() < 1e-13);
        assert_eq!(fp.dc, cl.dc);
        assert_eq!(fp.dphi, cl.dphi);
    }

    #[test]
    fn fp_correction_vanishes_at_large_j() {
        let p = params(1.5, 1.0, 1e15);
        let s = state(2.0, 0.9, 0.3, 5.1);
        let cl = classical_drift(&s, &p).unwrap().as_array();
        let fp = fp_drift(&s, &p, true).unwrap().as_array();
        for k in 0..4 {
            assert!((fp[k] - cl[k]).abs() < 1e-12 * cl[k].abs().max(1.0));
        }
    }

    #[test]
    fn fp_without_correction_is_classical() {
        let p = params(2.2, 1.4, 3.0);
        let s = state(0.8, 2.2, -0.5, 0.7);
        assert_eq!(
            fp_drift(&s, &p, false).unwrap(),
            classical_drift(&s, &p).unwrap()
        );
    }

    #[test]
    fn singularity_guards_fire() {
        let p = params(1.0, 1.0, 100.0);
        let at_floor = CanonicalState::new(1e-11, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            classical_drift(&at_floor, &p),
            Err(Error::Singularity { .. })
        ));
        let near_pole = CanonicalState::new(1.0, 0.0, 1.0 - 1e-10, 0.0).unwrap();
        assert!(matches!(
            diffusion_matrix(&near_pole, &p, QuasiprobKind::Q),
            Err(Error::Singularity { .. })
        ));
        assert!(matches!(
            drift_jacobian(&near_pole, &p),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn diffusion_vanishes_at_the_special_point() {
        let p = params(1.5, 1.0, 100.0);
        let d = diffusion_matrix(&state(1.0, 0.0, 0.0, 0.0), &p, QuasiprobKind::Q).unwrap();
        for row in d.m {
            for x in row {
                assert_eq!(x, 0.0);
            }
        }
    }

    #[test]
    fn diffusion_scales_inversely_with_j() {
        let s = state(3.0, 1.1, 0.4, 2.0);
        let d1 = diffusion_matrix(&s, &params(1.5, 1.0, 500.0), QuasiprobKind::Q).unwrap();
        let d2 = diffusion_matrix(&s, &params(1.5, 1.0, 1000.0), QuasiprobKind::Q).unwrap();
        for k in 0..4 {
            for l in 0..4 {
                assert_eq!(d2.m[k][l], d1.m[k][l] / 2.0);
            }
        }
    }

    #[test]
    fn decoupled_jacobian_is_zero() {
        let p = params(0.0, 1.0, 100.0);
        let m = drift_jacobian(&state(2.0, 1.0, 0.3, 4.4), &p).unwrap();
        assert_eq!(m, [[0.0; 4]; 4]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = params(1.7, 1.2, 100.0);
        let cases = [
            state(0.9, 0.4, -0.3, 1.2),
            state(4.0, 3.0, 0.55, 5.8),
            state(0.3, 5.9, -0.8, 2.6),
        ];
        let h = 1e-6;
        for s in cases {
            let m = drift_jacobian(&s, &p).unwrap();
            let y = s.as_array();
            for col in 0..4 {
                let mut yp = y;
                let mut ym = y;
                yp[col] += h;
                ym[col] -= h;
                let dp = drift_raw(&yp, p.nu(), p.gamma()).unwrap();
                let dm = drift_raw(&ym, p.nu(), p.gamma()).unwrap();
                for row in 0..4 {
                    let fd = (dp[row] - dm[row]) / (2.0 * h);
                    let scale = m[row][col].abs().max(1.0);
                    assert!(
                        (m[row][col] - fd).abs() < 1e-5 * scale,
                        "({row},{col}): analytic {} vs fd {fd}",
                        m[row][col]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn energy_conserved_along_drift(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
            gamma in 0.0..3.0f64,
        ) {
            let p = params(gamma, 1.2, 100.0);
            let s = state(i, psi, c, phi);
            let d = classical_drift(&s, &p).unwrap().as_array();
            let g = energy_gradient(&s, &p).unwrap();
            let scale = dot(&g, &g).sqrt() * dot(&d, &d).sqrt();
            prop_assert!(dot(&g, &d).abs() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn jacobian_is_traceless(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
            gamma in 0.1..3.0f64,
        ) {
            let p = params(gamma, 1.0, 100.0);
            let m = drift_jacobian(&state(i, psi, c, phi), &p).unwrap();
            let trace = m[0][0] + m[1][1] + m[2][2] + m[3][3];
            let scale: f64 = m.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
            prop_assert!(trace.abs() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn diffusion_chiral_symmetric_paired(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
            gamma in 0.1..3.0f64,
        ) {
            let p = params(gamma, 1.0, 200.0);
            let s = state(i, psi, c, phi);
            let d = diffusion_matrix(&s, &p, QuasiprobKind::Q).unwrap();
            // Chiral structure: diagonal 2x2 blocks exactly zero.
            for (k, l) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                prop_assert_eq!(d.m[k][l], 0.0);
                prop_assert_eq!(d.m[k + 2][l + 2], 0.0);
            }
            // Symmetric by construction.
            for k in 0..4 {
                for l in 0..4 {
                    prop_assert_eq!(d.m[k][l], d.m[l][k]);
                }
            }
            // P is the elementwise negation of Q.
            let dp = diffusion_matrix(&s, &p, QuasiprobKind::P).unwrap();
            for k in 0..4 {
                for l in 0..4 {
                    prop_assert_eq!(dp.m[k][l], -d.m[k][l]);
                }
            }
            // Eigenvalues in plus/minus pairs, trace zero.
            let (vals, vecs) = d.eigen();
            let scale = vals[3].abs().max(1e-300);
            prop_assert!((vals[0] + vals[3]).abs() <= 1e-10 * scale);
            prop_assert!((vals[1] + vals[2]).abs() <= 1e-10 * scale);
            for k in 0..4 {
                let mv = mat_vec(&d.m, &vecs[k]);
                for idx in 0..4 {
                    prop_assert!((mv[idx] - vals[k] * vecs[k][idx]).abs() <= 1e-10 * scale.max(1.0));
                }
            }
        }

        #[test]
        fn diffusion_balances_coherent_state_transport(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.9..0.9f64,
            phi in 0.0..TAU,
            gamma in 0.1..3.0f64,
        ) {
            // The coherent-state covariance G = diag(I, 1/(4I), (1-c^2)/2,
            // 1/(2(1-c^2)))/j is carried along the linearized flow without
            // deformation: dG/dt = J G + G J^T + 2 D(Q). The identity pins
            // every sign and power of the diffusion matrix to the drift and
            // makes the Q-function's vacuum noise floor stationary.
            let j = 200.0;
            let p = params(gamma, 1.0, j);
            let s = state(i, psi, c, phi);
            let s2 = 1.0 - c * c;
            let mut g = [[0.0; 4]; 4];
            g[0][0] = i / j;
            g[1][1] = 1.0 / (4.0 * i * j);
            g[2][2] = s2 / (2.0 * j);
            g[3][3] = 1.0 / (2.0 * s2 * j);
            let f = classical_drift(&s, &p).unwrap().as_array();
            let mut gdot = [[0.0; 4]; 4];
            gdot[0][0] = f[0] / j;
            gdot[1][1] = -f[0] / (4.0 * i * i * j);
            gdot[2][2] = -c * f[2] / j;
            gdot[3][3] = c * f[2] / (j * s2 * s2);
            let jac = drift_jacobian(&s, &p).unwrap();
            let d = diffusion_matrix(&s, &p, QuasiprobKind::Q).unwrap().m;
            let scale: f64 = d.iter().flatten().fold(1e-300, |acc, x| acc.max(x.abs()));
            for a in 0..4 {
                for b in 0..4 {
                    let mut flow = gdot[a][b];
                    for k in 0..4 {
                        flow -= jac[a][k] * g[k][b] + g[a][k] * jac[b][k];
                    }
                    prop_assert!(
                        (flow - 2.0 * d[a][b]).abs() <= 1e-10 * scale,
                        "entry ({a}, {b}): {flow} vs {}",
                        2.0 * d[a][b]
                    );
                }
            }
        }

        #[test]
        fn embedded_drift_matches_chart_drift(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
            gamma in 0.1..3.0f64,
        ) {
            let (nu, g) = (1.2, gamma);
            let y = [i, psi, c, phi];
            let y5 = embed(&y);
            let d4 = drift_raw(&y, nu, g).unwrap();
            let d5 = drift5(&y5, nu, g).unwrap();
            let back = tangent_project(&y5, &d5).unwrap();
            for k in 0..4 {
                let scale = d4[k].abs().max(1.0);
                prop_assert!((back[k] - d4[k]).abs() <= 1e-11 * scale);
            }
            // Precession keeps the spin on the sphere.
            let radial = y5[2] * d5[2] + y5[3] * d5[3] + y5[4] * d5[4];
            prop_assert!(radial.abs() <= 1e-14);
        }

        #[test]
        fn embedded_round_trips(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
        ) {
            let y = [i, psi, c, phi];
            let y5 = embed(&y);
            let back = project5(&y5);
            prop_assert!((back[0] - i).abs() <= 1e-14 * i);
            prop_assert_eq!(back[1], psi);
            prop_assert!((back[2] - c).abs() <= 1e-14);
            let dphi = (back[3] - phi).rem_euclid(TAU);
            prop_assert!(dphi.min(TAU - dphi) <= 1e-12);

            let v = [0.3, -1.1, 0.25, 0.8];
            let w = tangent_embed(&y, &v);
            let vb = tangent_project(&y5, &w).unwrap();
            for k in 0..4 {
                prop_assert!((vb[k] - v[k]).abs() <= 1e-12 * v[k].abs().max(1.0));
            }
            prop_assert!((energy5(&y5, 1.2, 1.5) - energy_raw(&y, 1.2, 1.5)).abs() <= 1e-12);
        }

        #[test]
        fn embedded_covectors_pair_like_chart_covectors(
            i in 0.05..20.0f64,
            psi in 0.0..TAU,
            c in -0.95..0.95f64,
            phi in 0.0..TAU,
        ) {
            let y = [i, psi, c, phi];
            let y5 = embed(&y);
            let eta = [0.7, -0.4, 1.3, -0.6];
            let v = [0.3, -1.1, 0.25, 0.8];
            let h = cotangent_embed(&y, &eta);
            let w = tangent_embed(&y, &v);
            let chart = dot(&eta, &v);
            let embedded: f64 = (0..5).map(|k| h[k] * w[k]).sum();
            prop_assert!((embedded - chart).abs() <= 1e-12 * chart.abs().max(1.0));

            let back = cotangent_project(&y5, &h).unwrap();
            for k in 0..4 {
                prop_assert!((back[k] - eta[k]).abs() <= 1e-12 * eta[k].abs().max(1.0));
            }
            // The spin-radial co-direction pairs to zero with every tangent
            // and must not leak into the chart components.
            let mut shifted = h;
            for k in 0..3 {
                shifted[2 + k] += 0.9 * y5[2 + k];
            }
            let same = cotangent_project(&y5, &shifted).unwrap();
            for k in 0..4 {
                prop_assert!((same[k] - eta[k]).abs() <= 1e-12 * eta[k].abs().max(1.0));
            }
        }

        #[test]
        fn embedded_jacobian_matches_finite_differences(
            i in 0.1..10.0f64,
            psi in 0.0..TAU,
            c in -0.9..0.9f64,
            phi in 0.0..TAU,
            gamma in 0.1..3.0f64,
        ) {
            let (nu, g) = (1.0, gamma);
            let y5 = embed(&[i, psi, c, phi]);
            let m = jacobian5(&y5, nu, g).unwrap();
            let h = 1e-6;
            for col in 0..5 {
                let mut yp = y5;
                let mut ym = y5;
                yp[col] += h;
                ym[col] -= h;
                let dp = drift5(&yp, nu, g).unwrap();
                let dm = drift5(&ym, nu, g).unwrap();
                for row in 0..5 {
                    let fd = (dp[row] - dm[row]) / (2.0 * h);
                    let scale = m[row][col].abs().max(1.0);
                    prop_assert!(
                        (m[row][col] - fd).abs() <= 1e-4 * scale,
                        "({},{}): analytic {} vs fd {}", row, col, m[row][col], fd
                    );
                }
            }
        }
    }
}
