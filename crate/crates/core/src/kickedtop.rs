//! Stroboscopic kicked-top map on the Bloch sphere: per-kick Lyapunov
//! analysis, point-cloud equilibration diagnostics against spherical
//! harmonics, and the per-kick quantum diffusion projected on the stable
//! direction.
//!
//! The per-kick diffusion matrix is derived from the torsion step's
//! smoothed-distribution propagator. In the stereographic chart
//! z = tan(theta/2) e^{i phi} the kick generator carries, besides the
//! classical drift, the second-order term (i tau / (2j+1)) dz^2 z^2 plus
//! its conjugate. Keeping only the genuinely second-order part and
//! rewriting in polar form gives (tau/(2j+1)) r dr dphi; the substitution
//! r dr = -(1 - c^2) dc for c = (1 - r^2)/(1 + r^2) turns this into
//! -(tau (1 - c^2)/(2j+1)) dc dphi. Read as a symmetric diffusion form
//! 2 D_cphi dc dphi, the generator's matrix in the canonical pair (c, phi)
//! is chiral with off-diagonal entry D_cphi = -(tau/2)(1 - c^2)/(2j+1);
//! the conjugate-ordering (P) evolution flips the sign. First-order
//! leftovers of the same term are 1/j drift corrections and are not
//! modeled.
//!
//! The generator acts during the torsion stage, and the torsion itself
//! shears the chart while the noise accumulates: at fixed c the internal
//! flow obeys d(dphi)/ds = tau * dc over the unit kick interval. The
//! injected covariance referred to the post-kick point is therefore
//! int_0^1 M_s B M_s^T ds with B = [[0, 2 D_cphi], [2 D_cphi, 0]] and
//! M_s = [[1, 0], [tau (1 - s), 1]], which evaluates to
//! Sigma = 2 D_cphi [[0, 1], [1, tau]]. The c-dependence rides through
//! unchanged because torsion preserves c.
//!
//! The stable and unstable directions of a strongly kicked top are far
//! from orthogonal, so "variance of the stable coordinate" must be read
//! off in the oblique frame decomposition dx = s e_s + u e_u. The
//! coefficient pair evolves diagonally (the tangent map carries each
//! Oseledets line to its successor), which reduces the full covariance
//! recursion to a scalar one for var(s): one kick contracts by the exact
//! squared stretch of e_s and then adds w^T Sigma w, where
//! w = (e_u[1], -e_u[0]) / det(e_s, e_u) is the dual covector of e_s.
//! Projecting Sigma with dot products instead of the dual covector, or
//! skipping the torsion shear, turns the accumulated variance negative;
//! the oblique reduction keeps it positive at a plateau of order 1/j,
//! with transient spikes where the two directions nearly collapse onto
//! each other.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::QuasiprobKind;
use crate::error::{Error, Result};
use crate::linalg::{cross, dot3, mat3_mul, mat3_vec, normalized3, Mat3, Vec3};
use crate::model::{BlochVector, TAU};

/// Kick parameters: precession angle, torsion strength, and the spin size
/// that sets the 1/(2j+1) diffusion scale.
#[derive(Debug, Clone, Copy)]
pub struct TopParams {
    pub p: f64,
    pub tau: f64,
    pub j: f64,
}

impl TopParams {
    pub fn new(p: f64, tau: f64, j: f64) -> Result<Self> {
        if !(p.is_finite() && tau.is_finite()) || !(j > 0.0) || !j.is_finite() {
            return Err(Error::Validation(format!(
                "need finite p, tau and j > 0; got ({p}, {tau}, {j})"
            )));
        }
        Ok(Self { p, tau, j })
    }

    fn diffusion_scale(&self) -> f64 {
        self.tau / (2.0 * (2.0 * self.j + 1.0))
    }
}

fn rot_x(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0], v[1] * c - v[2] * s, v[1] * s + v[2] * c]
}

fn rot_z(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

fn to_vec3(l: &BlochVector) -> Vec3 {
    [l.lx, l.ly, l.lz]
}

fn to_bloch(v: &Vec3) -> BlochVector {
    BlochVector { lx: v[0], ly: v[1], lz: v[2] }
}

fn map_vec(l: &Vec3, params: &TopParams) -> Vec3 {
    let m = rot_x(l, params.p);
    normalized3(&rot_z(&m, params.tau * m[2]))
}

fn map_vec_inverse(l: &Vec3, params: &TopParams) -> Vec3 {
    let m = rot_z(l, -params.tau * l[2]);
    normalized3(&rot_x(&m, -params.p))
}

/// One kick: precession about x by `p`, then torsion (a z-rotation by
/// tau * lz of the precessed point). The output is re-projected onto the
/// unit sphere so iterated applications stay on the manifold.
pub fn top_map(l: &BlochVector, params: &TopParams) -> BlochVector {
    to_bloch(&map_vec(&to_vec3(l), params))
}

/// Exact inverse kick: the torsion angle is recovered from the output's
/// z-component, which torsion preserves.
pub fn top_map_inverse(l: &BlochVector, params: &TopParams) -> BlochVector {
    to_bloch(&map_vec_inverse(&to_vec3(l), params))
}

fn rot_x_matrix(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_z_matrix(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn tangent_at_vec(l: &Vec3, params: &TopParams) -> Mat3 {
    let m = rot_x(l, params.p);
    let l1 = rot_z(&m, params.tau * m[2]);
    let mut rz = rot_z_matrix(params.tau * m[2]);
    let ez_cross_l1 = [-l1[1], l1[0], 0.0];
    for (row, e) in rz.iter_mut().zip(ez_cross_l1) {
        row[2] += params.tau * e;
    }
    mat3_mul(&rz, &rot_x_matrix(params.p))
}

/// Differential of [`top_map`] at `l`, mapping tangent vectors at `l` to
/// tangent vectors at the image point. Unit determinant (the map is
/// area-preserving).
pub fn top_tangent(l: &BlochVector, params: &TopParams) -> Mat3 {
    tangent_at_vec(&to_vec3(l), params)
}

fn tangent_inverse_at_vec(l1: &Vec3, params: &TopParams) -> Mat3 {
    let a = params.tau * l1[2];
    let m = rot_z(l1, -a);
    let mut rz = rot_z_matrix(-a);
    let ez_cross_m = [-m[1], m[0], 0.0];
    for (row, e) in rz.iter_mut().zip(ez_cross_m) {
        row[2] -= params.tau * e;
    }
    mat3_mul(&rot_x_matrix(-params.p), &rz)
}

/// Differential of the inverse kick at an image point `l1`.
pub fn top_tangent_inverse(l1: &BlochVector, params: &TopParams) -> Mat3 {
    tangent_inverse_at_vec(&to_vec3(l1), params)
}

fn project_tangent(v: &Vec3, l: &Vec3) -> Vec3 {
    let p = dot3(v, l);
    [v[0] - p * l[0], v[1] - p * l[1], v[2] - p * l[2]]
}

fn tangent_basis(l: &Vec3) -> (Vec3, Vec3) {
    let axis = if l[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalized3(&cross(&axis, l));
    let e2 = cross(l, &e1);
    (e1, e2)
}

/// Windows of the post-transient region compared for convergence.
const TOP_WINDOWS: usize = 4;
/// Leading per-kick exponents below this are treated as zero.
const TOP_ZERO_FLOOR: f64 = 1e-2;

/// Per-kick Lyapunov exponents of the two-dimensional tangent dynamics,
/// descending.
#[derive(Debug, Clone)]
pub struct TopLyapunov {
    pub exponents: [f64; 2],
    /// Leading-exponent estimates over consecutive post-transient windows.
    pub window_estimates: Vec<f64>,
    pub n_transient: usize,
    pub n_steps: usize,
}

impl TopLyapunov {
    pub fn lambda(&self) -> f64 {
        self.exponents[0]
    }
}

/// Benettin estimate on the tangent plane transported along the orbit of
/// `l0`, with the first 10% discarded as transient. Window estimates of
/// the leading exponent must agree within 10% unless consistent with zero.
pub fn top_lyapunov(l0: &BlochVector, params: &TopParams, n_steps: usize) -> Result<TopLyapunov> {
    if n_steps < 10_000 {
        return Err(Error::Validation(format!(
            "need n_steps >= 10000 for a per-kick exponent, got {n_steps}"
        )));
    }
    let mut l = normalized3(&to_vec3(l0));
    let (mut v1, mut v2) = tangent_basis(&l);
    let mut logs = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let m = tangent_at_vec(&l, params);
        l = map_vec(&l, params);
        v1 = project_tangent(&mat3_vec(&m, &v1), &l);
        v2 = project_tangent(&mat3_vec(&m, &v2), &l);
        let r1 = norm3_checked(&v1)?;
        v1 = [v1[0] / r1, v1[1] / r1, v1[2] / r1];
        let p = dot3(&v2, &v1);
        v2 = [v2[0] - p * v1[0], v2[1] - p * v1[1], v2[2] - p * v1[2]];
        let r2 = norm3_checked(&v2)?;
        v2 = [v2[0] / r2, v2[1] / r2, v2[2] / r2];
        logs.push([r1.ln(), r2.ln()]);
    }
    let skip = n_steps.div_ceil(10);
    let post = &logs[skip..];
    let mean = |rows: &[[f64; 2]]| -> [f64; 2] {
        let mut acc = [0.0; 2];
        for r in rows {
            acc[0] += r[0];
            acc[1] += r[1];
        }
        [acc[0] / rows.len() as f64, acc[1] / rows.len() as f64]
    };
    let mut exponents = mean(post);
    exponents.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let block = post.len() / TOP_WINDOWS;
    let window_estimates: Vec<f64> = (0..TOP_WINDOWS)
        .map(|w| {
            let to = if w + 1 == TOP_WINDOWS { post.len() } else { (w + 1) * block };
            mean(&post[w * block..to])[0]
        })
        .collect();
    for pair in window_estimates.windows(2) {
        let scale = pair[0].abs().max(pair[1].abs());
        if scale > TOP_ZERO_FLOOR && (pair[0] - pair[1]).abs() > 0.1 * scale {
            return Err(Error::NonConvergence(format!(
                "per-kick exponent windows {} and {} differ by more than 10%",
                pair[0], pair[1]
            )));
        }
    }
    Ok(TopLyapunov { exponents, window_estimates, n_transient: skip, n_steps })
}

fn norm3_checked(v: &Vec3) -> Result<f64> {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r < 1e-300 {
        return Err(Error::DegenerateTangent { t: f64::NAN });
    }
    Ok(r)
}

/// Point cloud on the unit sphere with its generating seed.
#[derive(Debug, Clone)]
pub struct SphereCloud {
    pub points: Vec<BlochVector>,
    pub seed: u64,
}

impl SphereCloud {
    /// Uniformly distributed cloud.
    pub fn uniform(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("empty cloud requested".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi: f64 = rng.random_range(0.0..TAU);
                let s = (1.0 - z * z).max(0.0).sqrt();
                to_bloch(&normalized3(&[s * phi.cos(), s * phi.sin(), z]))
            })
            .collect();
        Ok(Self { points, seed })
    }

    /// Cloud uniform in area over the spherical cap of angular radius
    /// `radius` (radians) around `center`.
    pub fn cap(center: &BlochVector, radius: f64, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || !(radius > 0.0 && radius < std::f64::consts::PI) {
            return Err(Error::Validation(format!(
                "need n >= 1 and cap radius in (0, pi), got ({n}, {radius})"
            )));
        }
        let c = normalized3(&to_vec3(center));
        let (u, v) = tangent_basis(&c);
        let cos_r = radius.cos();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let ct: f64 = rng.random_range(cos_r..=1.0);
                let alpha: f64 = rng.random_range(0.0..TAU);
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                let (sa, ca) = alpha.sin_cos();
                let p = [
                    ct * c[0] + st * (ca * u[0] + sa * v[0]),
                    ct * c[1] + st * (ca * u[1] + sa * v[1]),
                    ct * c[2] + st * (ca * u[2] + sa * v[2]),
                ];
                to_bloch(&normalized3(&p))
            })
            .collect();
        Ok(Self { points, seed })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Real orthonormal spherical harmonics tracked by the equilibration
/// diagnostics: all (l, m) with 1 <= l <= 4; m < 0 labels the sine
/// component, m > 0 the cosine one.
pub const HARMONIC_COUNT: usize = 24;

pub fn harmonic_labels() -> [(u8, i8); HARMONIC_COUNT] {
    let mut out = [(0u8, 0i8); HARMONIC_COUNT];
    let mut k = 0;
    let mut l = 1u8;
    while l <= 4 {
        let mut m = -(l as i8);
        while m <= l as i8 {
            out[k] = (l, m);
            k += 1;
            m += 1;
        }
        l += 1;
    }
    out
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre values P_l^m(x) for l <= 4, m >= 0, with the
/// Condon-Shortley phase, via the standard recurrences.
fn assoc_legendre(x: f64) -> [[f64; 5]; 5] {
    let mut p = [[0.0; 5]; 5];
    let s = (1.0 - x * x).max(0.0).sqrt();
    p[0][0] = 1.0;
    for m in 0..4usize {
        p[m + 1][m + 1] = -((2 * m + 1) as f64) * s * p[m][m];
    }
    for m in 0..4usize {
        p[m + 1][m] = x * ((2 * m + 1) as f64) * p[m][m];
    }
    for m in 0..=4usize {
        for l in m + 2..=4 {
            p[l][m] = (x * ((2 * l - 1) as f64) * p[l - 1][m]
                - ((l + m - 1) as f64) * p[l - 2][m])
                / ((l - m) as f64);
        }
    }
    p
}

fn harmonic_norms() -> [[f64; 5]; 5] {
    let mut n = [[0.0; 5]; 5];
    for (l, row) in n.iter_mut().enumerate() {
        for (m, cell) in row.iter_mut().enumerate().take(l + 1) {
            let ratio = factorial((l - m) as u32) / factorial((l + m) as u32);
            *cell = (((2 * l + 1) as f64) / (4.0 * std::f64::consts::PI) * ratio).sqrt();
        }
    }
    n
}

fn harmonic_row(l: &BlochVector, norms: &[[f64; 5]; 5]) -> [f64; HARMONIC_COUNT] {
    let p = assoc_legendre(l.lz);
    let phi = l.ly.atan2(l.lx);
    let mut out = [0.0; HARMONIC_COUNT];
    let mut k = 0;
    for deg in 1..=4usize {
        for m in -(deg as i32)..=deg as i32 {
            let ma = m.unsigned_abs() as usize;
            let base = norms[deg][ma] * p[deg][ma];
            out[k] = match m.signum() {
                0 => base,
                1 => std::f64::consts::SQRT_2 * base * (ma as f64 * phi).cos(),
                _ => std::f64::consts::SQRT_2 * base * (ma as f64 * phi).sin(),
            };
            k += 1;
        }
    }
    out
}

/// Equal-area occupancy grid: 20 z-bands by 20 azimuthal sectors.
const CELL_BANDS: usize = 20;
pub const CELL_COUNT: usize = CELL_BANDS * CELL_BANDS;

fn cell_index(l: &BlochVector) -> usize {
    let band = (((l.lz + 1.0) / 2.0 * CELL_BANDS as f64).floor() as i64)
        .clamp(0, CELL_BANDS as i64 - 1) as usize;
    let phi = l.ly.atan2(l.lx).rem_euclid(TAU);
    let sector =
        ((phi / TAU * CELL_BANDS as f64).floor() as i64).clamp(0, CELL_BANDS as i64 - 1) as usize;
    band * CELL_BANDS + sector
}

/// Per-step cloud statistics: mean absolute spherical-harmonic moments and
/// the fraction of occupied equal-area cells, sampled before the first
/// kick and after every kick.
#[derive(Debug, Clone)]
pub struct EquilibrationSeries {
    pub harmonic_abs: Vec<[f64; HARMONIC_COUNT]>,
    pub occupancy: Vec<f64>,
    pub n_points: usize,
}

impl EquilibrationSeries {
    pub fn n_steps(&self) -> usize {
        self.harmonic_abs.len() - 1
    }

    /// Largest tracked harmonic magnitude at one step.
    pub fn max_harmonic(&self, step: usize) -> f64 {
        self.harmonic_abs[step].iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Cells occupied at one step, as a count.
    pub fn occupied_count(&self, step: usize) -> usize {
        (self.occupancy[step] * CELL_COUNT as f64).round() as usize
    }
}

/// Iterate the kick map over a cloud, recording harmonic moments and cell
/// occupancy at every step.
pub fn top_equilibration(
    cloud0: &SphereCloud,
    params: &TopParams,
    n_steps: usize,
) -> Result<EquilibrationSeries> {
    if cloud0.len() < 1000 {
        return Err(Error::Validation(format!(
            "need a cloud of at least 1000 points, got {}",
            cloud0.len()
        )));
    }
    let norms = harmonic_norms();
    let mut points: Vec<Vec3> = cloud0.points.iter().map(to_vec3).collect();
    let n = points.len() as f64;
    let mut series = EquilibrationSeries {
        harmonic_abs: Vec::with_capacity(n_steps + 1),
        occupancy: Vec::with_capacity(n_steps + 1),
        n_points: points.len(),
    };
    let record = |points: &[Vec3], series: &mut EquilibrationSeries| {
        let mut acc = [0.0; HARMONIC_COUNT];
        let mut cells = vec![false; CELL_COUNT];
        for v in points {
            let b = to_bloch(v);
            debug_assert!((b.norm() - 1.0).abs() < 1e-12);
            let row = harmonic_row(&b, &norms);
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r;
            }
            cells[cell_index(&b)] = true;
        }
        let occupied = cells.iter().filter(|&&c| c).count();
        series
            .harmonic_abs
            .push(acc.map(|a| (a / n).abs()));
        series.occupancy.push(occupied as f64 / CELL_COUNT as f64);
    };
    record(&points, &mut series);
    for _ in 0..n_steps {
        points.par_iter_mut().for_each(|v| *v = map_vec(v, params));
        record(&points, &mut series);
    }
    Ok(series)
}

/// Fractional step at which the largest harmonic first falls below
/// `threshold`, log-linearly interpolated between recorded steps; None if
/// it never does.
pub fn equilibration_time(series: &EquilibrationSeries, threshold: f64) -> Option<f64> {
    if !(threshold > 0.0) {
        return None;
    }
    let m0 = series.max_harmonic(0);
    if m0 < threshold {
        return Some(0.0);
    }
    for k in 0..series.harmonic_abs.len() - 1 {
        let (a, b) = (series.max_harmonic(k), series.max_harmonic(k + 1));
        if a >= threshold && b < threshold {
            if b <= 0.0 {
                return Some((k + 1) as f64);
            }
            let frac = (a.ln() - threshold.ln()) / (a.ln() - b.ln());
            return Some(k as f64 + frac);
        }
    }
    None
}

/// Stable and unstable directions at one orbit point, unit vectors in the
/// canonical (c, phi) chart.
#[derive(Debug, Clone, Copy)]
pub struct TopFrame {
    pub e_s: [f64; 2],
    pub e_u: [f64; 2],
}

/// Pole guard for the (c, phi) chart.
const POLE_GUARD: f64 = 1e-9;

fn chart_components(l: &Vec3, v: &Vec3) -> Result<[f64; 2]> {
    let rho2 = l[0] * l[0] + l[1] * l[1];
    if !(1.0 - l[2].abs() > POLE_GUARD) {
        return Err(Error::Singularity { what: "kicked-top chart at a pole" });
    }
    Ok([v[2], (l[0] * v[1] - l[1] * v[0]) / rho2])
}

fn chart_to_sphere(l: &Vec3, e: &[f64; 2]) -> Vec3 {
    let rho2 = l[0] * l[0] + l[1] * l[1];
    [
        -e[0] * l[2] * l[0] / rho2 - e[1] * l[1],
        -e[0] * l[2] * l[1] / rho2 + e[1] * l[0],
        e[0],
    ]
}

/// Diffusion matrix of the torsion generator in the (c, phi) chart; see
/// the module docs for the derivation. Chiral: zero diagonal, the
/// off-diagonal entry -(tau/2)(1 - c^2)/(2j+1) for kind Q, negated for P.
pub fn top_kick_diffusion(
    l: &BlochVector,
    params: &TopParams,
    kind: QuasiprobKind,
) -> Result<[[f64; 2]; 2]> {
    if !(1.0 - l.lz.abs() > POLE_GUARD) {
        return Err(Error::Singularity { what: "kicked-top chart at a pole" });
    }
    let sign = match kind {
        QuasiprobKind::Q => 1.0,
        QuasiprobKind::P => -1.0,
    };
    let d = -sign * params.diffusion_scale() * (1.0 - l.lz * l.lz);
    Ok([[0.0, d], [d, 0.0]])
}

/// Effective stable-direction diffusion of one kick, referred to the
/// post-kick point `l` with `frame` evaluated there: the stable-coordinate
/// component of the torsion-sheared injection, extracted with the dual
/// covector of e_s (module docs). The caller owns the variance recursion
/// var' = e^{-2 lambda} var + 2 D_eff.
pub fn top_diffusion_step(
    l: &BlochVector,
    params: &TopParams,
    frame: &TopFrame,
    kind: QuasiprobKind,
) -> Result<f64> {
    let b = 2.0 * top_kick_diffusion(l, params, kind)?[0][1];
    let (s, u) = (frame.e_s, frame.e_u);
    let det = s[0] * u[1] - s[1] * u[0];
    if det.abs() < 1e-300 {
        return Err(Error::DegenerateTangent { t: f64::NAN });
    }
    let w = [u[1] / det, -u[0] / det];
    Ok(b * (w[0] * w[1] + 0.5 * params.tau * w[1] * w[1]))
}

/// One step of the discrete stable-variance recursion with the mean
/// per-kick exponent as contraction kernel. [`top_diffusion`] applies the
/// same recursion with the exact per-kick stretch of e_s instead.
pub fn variance_update(var: f64, lambda: f64, d_ss: f64) -> f64 {
    (-2.0 * lambda).exp() * var + 2.0 * d_ss
}

/// Stable-direction diffusion summary along one orbit.
#[derive(Debug, Clone)]
pub struct TopDiffusionRun {
    /// Kick indices of the reporting window.
    pub steps: Vec<usize>,
    pub frames: Vec<TopFrame>,
    /// Effective stable-coordinate diffusion of each kick.
    pub d_ss: Vec<f64>,
    /// Stable-coordinate variance after each kick of the window.
    pub variance: Vec<f64>,
    /// Per-kick leading exponent measured on the same orbit.
    pub lambda: f64,
    pub var0: f64,
}

/// Kicks discarded while tangent directions converge, at each end.
const FRAME_WARMUP: usize = 50;
/// Transported directions from two seeds must agree within this angle.
const TOP_SEED_ANGLE_TOL: f64 = 1e-3;

/// Transport a seed tangent vector along the orbit (forward over the map
/// tangent, or backward over the inverse-map tangent), returning unit
/// vectors at every orbit point, index-aligned with `orbit`.
fn transported_directions(
    orbit: &[Vec3],
    params: &TopParams,
    seed3: &Vec3,
    backward: bool,
) -> Result<Vec<Vec3>> {
    let n = orbit.len();
    let mut out = vec![[0.0; 3]; n];
    if backward {
        let mut v = normalized3(&project_tangent(seed3, &orbit[n - 1]));
        out[n - 1] = v;
        for k in (0..n - 1).rev() {
            let m = tangent_inverse_at_vec(&orbit[k + 1], params);
            v = project_tangent(&mat3_vec(&m, &v), &orbit[k]);
            let r = norm3_checked(&v)?;
            v = [v[0] / r, v[1] / r, v[2] / r];
            out[k] = v;
        }
    } else {
        let mut v = normalized3(&project_tangent(seed3, &orbit[0]));
        out[0] = v;
        for k in 1..n {
            let m = tangent_at_vec(&orbit[k - 1], params);
            v = project_tangent(&mat3_vec(&m, &v), &orbit[k]);
            let r = norm3_checked(&v)?;
            v = [v[0] / r, v[1] / r, v[2] / r];
            out[k] = v;
        }
    }
    Ok(out)
}

const TOP_SEED_A: Vec3 = [0.29, -0.44, 0.85];
const TOP_SEED_B: Vec3 = [-0.77, 0.52, 0.36];

/// Run the per-kick diffusion analysis along the orbit of `l0`: transport
/// stable/unstable directions, extract the stable-coordinate component of
/// each kick's sheared injection in the oblique frame (module docs), and
/// accumulate the variance recursion seeded with `var0`, contracting by
/// the exact per-kick stretch of e_s. Reported on the window where both
/// directions have converged.
pub fn top_diffusion(
    l0: &BlochVector,
    params: &TopParams,
    n_steps: usize,
    var0: f64,
    kind: QuasiprobKind,
) -> Result<TopDiffusionRun> {
    if n_steps < 4 * FRAME_WARMUP {
        return Err(Error::Validation(format!(
            "need n_steps >= {}, got {n_steps}",
            4 * FRAME_WARMUP
        )));
    }
    if !(var0 >= 0.0) {
        return Err(Error::Validation(format!("need var0 >= 0, got {var0}")));
    }
    let mut orbit = Vec::with_capacity(n_steps + 1);
    let mut l = normalized3(&to_vec3(l0));
    orbit.push(l);
    for _ in 0..n_steps {
        l = map_vec(&l, params);
        orbit.push(l);
    }

    let fwd_a = transported_directions(&orbit, params, &TOP_SEED_A, false)?;
    let fwd_b = transported_directions(&orbit, params, &TOP_SEED_B, false)?;
    let bwd_a = transported_directions(&orbit, params, &TOP_SEED_A, true)?;
    let bwd_b = transported_directions(&orbit, params, &TOP_SEED_B, true)?;
    let window = FRAME_WARMUP..=n_steps - FRAME_WARMUP;
    for k in window.clone() {
        for (x, y, label) in [(&fwd_a[k], &fwd_b[k], "unstable"), (&bwd_a[k], &bwd_b[k], "stable")]
        {
            let angle = dot3(x, y).abs().min(1.0).acos();
            if angle > TOP_SEED_ANGLE_TOL {
                return Err(Error::NonConvergence(format!(
                    "{label} direction seeds disagree by {angle:.2e} rad at kick {k}"
                )));
            }
        }
    }

    // Per-kick leading exponent from the growth of the unstable direction,
    // measured over the reporting window.
    let mut log_sum = 0.0;
    let mut v = fwd_a[FRAME_WARMUP];
    for k in FRAME_WARMUP..n_steps - FRAME_WARMUP {
        let m = tangent_at_vec(&orbit[k], params);
        let w = project_tangent(&mat3_vec(&m, &v), &orbit[k + 1]);
        let r = norm3_checked(&w)?;
        log_sum += r.ln();
        v = [w[0] / r, w[1] / r, w[2] / r];
    }
    let lambda = log_sum / (n_steps - 2 * FRAME_WARMUP) as f64;

    let mut run = TopDiffusionRun {
        steps: Vec::new(),
        frames: Vec::new(),
        d_ss: Vec::new(),
        variance: Vec::new(),
        lambda,
        var0,
    };
    let mut var = var0;
    let mut prev: Option<TopFrame> = None;
    for k in window {
        let b = to_bloch(&orbit[k]);
        let e_s = chart_unit(&orbit[k], &bwd_a[k])?;
        let e_u = chart_unit(&orbit[k], &fwd_a[k])?;
        let frame = TopFrame { e_s, e_u };
        let d_ss = top_diffusion_step(&b, params, &frame, kind)?;
        if let Some(last) = prev {
            let m = tangent_at_vec(&orbit[k - 1], params);
            let v = chart_to_sphere(&orbit[k - 1], &last.e_s);
            let w = project_tangent(&mat3_vec(&m, &v), &orbit[k]);
            let pushed = chart_components(&orbit[k], &w)?;
            let det = e_s[0] * e_u[1] - e_s[1] * e_u[0];
            let sigma = (e_u[1] * pushed[0] - e_u[0] * pushed[1]) / det;
            var = sigma * sigma * var + 2.0 * d_ss;
        }
        prev = Some(frame);
        run.steps.push(k);
        run.frames.push(frame);
        run.d_ss.push(d_ss);
        run.variance.push(var);
    }
    Ok(run)
}

fn chart_unit(l: &Vec3, v: &Vec3) -> Result<[f64; 2]> {
    let c = chart_components(l, v)?;
    let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
    if r < 1e-300 {
        return Err(Error::DegenerateTangent { t: f64::NAN });
    }
    Ok([c[0] / r, c[1] / r])
}
