//! Adaptive Dormand-Prince 5(4) integration with dense output, energy-drift
//! auditing, tangent-bundle propagation with periodic Gram-Schmidt
//! reorthonormalization, and Poincare section event detection.
//!
//! Integration runs in the embedded representation (I, psi, lx, ly, lz):
//! the spin advances as a unit vector, so trajectories hugging the poles
//! c = +/-1, where the chart equations blow up as 1/sin(theta), cost nothing
//! extra. The precession angle psi is integrated directly and kept unwrapped
//! so event bracketing sees a continuous signal; chart views wrap phi on
//! output.

use crate::dynamics::{drift5, embed, energy5, jacobian5, project5, tangent_embed};
use crate::error::{Error, Result};
use crate::linalg::{dot, gram_schmidt, mat_vec, norm, normalized, Vec4};
use crate::model::{wrap_angle, BlochVector, CanonicalState, ModelParams, TAU};

pub const DEFAULT_RTOL: f64 = 1e-9;
pub const DEFAULT_ATOL: f64 = 1e-11;
pub const DEFAULT_RENORM_DT: f64 = 1.0;

/// Runaway guard on total attempted steps per run.
const MAX_STEPS: u64 = 50_000_000;
/// Relative step-size floor; below this the step has underflowed.
const H_FLOOR_REL: f64 = 1e-13;

// Dormand-Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output weights for the fifth interpolation coefficient.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// PI step-size controller (Hairer's dopri5 settings).
const SAFE: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_SHRINK_MAX: f64 = 0.1;
const FAC_GROW_MAX: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
    pub rhs_evals: u64,
    pub h_min: f64,
    pub h_max: f64,
}

impl StepStats {
    fn new() -> Self {
        Self { accepted: 0, rejected: 0, rhs_evals: 0, h_min: f64::INFINITY, h_max: 0.0 }
    }
}

/// One accepted-step dense-output segment: a quartic interpolant on
/// [t0, t0 + h].
#[derive(Debug, Clone)]
pub(crate) struct DenseSegment<const N: usize> {
    pub t0: f64,
    pub h: f64,
    pub rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseSegment<N> {
    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = self.eval_theta(i, theta);
        }
        y
    }

    pub fn eval_component(&self, i: usize, t: f64) -> f64 {
        self.eval_theta(i, ((t - self.t0) / self.h).clamp(0.0, 1.0))
    }

    fn eval_theta(&self, i: usize, theta: f64) -> f64 {
        let r = &self.rcont;
        r[0][i]
            + theta
                * (r[1][i] + (1.0 - theta) * (r[2][i] + theta * (r[3][i] + (1.0 - theta) * r[4][i])))
    }
}

/// Time-ordered result of an integration run: states at accepted steps,
/// per-sample energy, dense-output segments, and step statistics.
///
/// `states` hold chart coordinates (I, psi, c, phi) with psi unwrapped and
/// phi wrapped to (-pi, pi]; use [`Trajectory::state`] or
/// [`Trajectory::state_at`] for clamped [`CanonicalState`] views. Dense
/// output is stored in the embedded representation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: ModelParams,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 4]>,
    pub energies: Vec<f64>,
    /// max |eps(t) - eps(0)| / max(1, |eps(0)|) over all samples.
    pub energy_drift: f64,
    pub stats: StepStats,
    pub(crate) segments: Vec<DenseSegment<5>>,
}

impl Trajectory {
    fn new(params: ModelParams) -> Self {
        Self {
            params,
            times: Vec::new(),
            states: Vec::new(),
            energies: Vec::new(),
            energy_drift: 0.0,
            stats: StepStats::new(),
            segments: Vec::new(),
        }
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn has_dense(&self) -> bool {
        !self.segments.is_empty()
    }

    /// Wrapped, clamped view of sample `idx`.
    pub fn state(&self, idx: usize) -> CanonicalState {
        CanonicalState::from_raw(&self.states[idx])
    }

    pub(crate) fn segment_at(&self, t: f64) -> Result<&DenseSegment<5>> {
        if !self.has_dense() {
            return Err(Error::Domain("trajectory has no dense output".into()));
        }
        let slack = 1e-12 * self.t_end().abs().max(1.0);
        if t < self.t0() - slack || t > self.t_end() + slack {
            return Err(Error::Domain(format!(
                "t = {t} outside trajectory range [{}, {}]",
                self.t0(),
                self.t_end()
            )));
        }
        let idx = self
            .segments
            .partition_point(|s| s.t0 <= t)
            .saturating_sub(1);
        Ok(&self.segments[idx])
    }

    /// Embedded state at arbitrary time via dense output.
    pub(crate) fn raw5_at(&self, t: f64) -> Result<[f64; 5]> {
        Ok(self.segment_at(t)?.eval(t))
    }

    /// Chart state at arbitrary time via dense output.
    pub(crate) fn raw_at(&self, t: f64) -> Result<[f64; 4]> {
        Ok(project5(&self.raw5_at(t)?))
    }

    /// Interpolated state at arbitrary time within the integration range.
    pub fn state_at(&self, t: f64) -> Result<CanonicalState> {
        Ok(CanonicalState::from_raw(&self.raw_at(t)?))
    }
}

pub(crate) struct RawStep<'a, const N: usize> {
    pub t0: f64,
    pub h: f64,
    /// Step end time; equals the landing boundary exactly when clamped.
    pub t1: f64,
    pub y1: &'a [f64; N],
    pub rcont: Option<&'a [[f64; N]; 5]>,
}

pub(crate) enum Flow {
    Continue,
    Stop,
}

pub(crate) struct DriveOpts {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub dense: bool,
}

pub(crate) enum DriveError {
    Underflow { t: f64, h: f64 },
    Budget { t: f64 },
    Inner(Error),
}

pub(crate) struct DriveStats {
    pub stats: StepStats,
    #[allow(dead_code)]
    pub stopped_early: bool,
}

fn scaled_err_norm<const N: usize>(
    err: &[f64; N],
    y0: &[f64; N],
    y1: &[f64; N],
    rtol: f64,
    atol: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let e = err[i] / sc;
        acc += e * e;
    }
    (acc / N as f64).sqrt()
}

/// One Dormand-Prince attempt from (t, y) with step h. On success fills the
/// stage buffer and y1 and returns the scaled error norm; an Err from the
/// RHS (chart singularity) or a non-finite result asks the caller to retry
/// with a smaller step.
#[allow(clippy::too_many_arguments)]
fn try_step<const N: usize>(
    rhs: &mut impl FnMut(f64, &[f64; N], &mut [f64; N]) -> Result<()>,
    t: f64,
    y: &[f64; N],
    h: f64,
    k: &mut [[f64; N]; 7],
    y1: &mut [f64; N],
    rtol: f64,
    atol: f64,
    evals: &mut u64,
) -> std::result::Result<f64, ()> {
    let mut ys = [0.0; N];
    macro_rules! stage {
        ($idx:expr, $c:expr, $($coef:expr => $kj:expr),+) => {{
            for i in 0..N {
                let mut acc = 0.0;
                $(acc += $coef * k[$kj][i];)+
                ys[i] = y[i] + h * acc;
            }
            *evals += 1;
            let (head, tail) = k.split_at_mut($idx);
            let _ = head;
            if rhs(t + $c * h, &ys, &mut tail[0]).is_err() {
                return Err(());
            }
        }};
    }

    stage!(1, C2, A21 => 0);
    stage!(2, C3, A31 => 0, A32 => 1);
    stage!(3, C4, A41 => 0, A42 => 1, A43 => 2);
    stage!(4, C5, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
    stage!(5, 1.0, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);

    for i in 0..N {
        y1[i] = y[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
    }
    *evals += 1;
    {
        let (head, tail) = k.split_at_mut(6);
        let _ = head;
        if rhs(t + h, y1, &mut tail[0]).is_err() {
            return Err(());
        }
    }

    let mut err = [0.0; N];
    for i in 0..N {
        err[i] = h
            * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                + E7 * k[6][i]);
    }
    let norm = scaled_err_norm(&err, y, y1, rtol, atol);
    if !norm.is_finite() || y1.iter().any(|v| !v.is_finite()) {
        return Err(());
    }
    Ok(norm)
}

fn dense_coefficients<const N: usize>(
    y0: &[f64; N],
    y1: &[f64; N],
    k: &[[f64; N]; 7],
    h: f64,
) -> [[f64; N]; 5] {
    let mut rc = [[0.0; N]; 5];
    for i in 0..N {
        let ydiff = y1[i] - y0[i];
        let bspl = h * k[0][i] - ydiff;
        rc[0][i] = y0[i];
        rc[1][i] = ydiff;
        rc[2][i] = bspl;
        rc[3][i] = ydiff - h * k[6][i] - bspl;
        rc[4][i] = h
            * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                + D7 * k[6][i]);
    }
    rc
}

fn initial_step<const N: usize>(
    rhs: &mut impl FnMut(f64, &[f64; N], &mut [f64; N]) -> Result<()>,
    t0: f64,
    y0: &[f64; N],
    k1: &[f64; N],
    opts: &DriveOpts,
    evals: &mut u64,
) -> f64 {
    let sc = |i: usize| opts.atol + opts.rtol * y0[i].abs();
    let dnf: f64 = (0..N).map(|i| (k1[i] / sc(i)).powi(2)).sum();
    let dny: f64 = (0..N).map(|i| (y0[i] / sc(i)).powi(2)).sum();
    let mut h0 = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        0.01 * (dny / dnf).sqrt()
    };
    h0 = h0.min(opts.h_max);

    let mut ye = [0.0; N];
    for i in 0..N {
        ye[i] = y0[i] + h0 * k1[i];
    }
    let mut k2 = [0.0; N];
    *evals += 1;
    if rhs(t0 + h0, &ye, &mut k2).is_err() {
        return (h0 * 1e-3).max(1e-10);
    }
    let der2: f64 = (0..N)
        .map(|i| ((k2[i] - k1[i]) / sc(i)).powi(2))
        .sum::<f64>()
        .sqrt()
        / h0;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    h1.min(100.0 * h0).min(opts.h_max)
}

/// Adaptive driver. Integrates from t0 to t_end, forcing exact landings on
/// t0 + k*stop_dt where `on_stop` may mutate the state (tangent
/// renormalization), and feeding every accepted step to `sink`.
pub(crate) fn drive<const N: usize>(
    rhs: &mut impl FnMut(f64, &[f64; N], &mut [f64; N]) -> Result<()>,
    t0: f64,
    t_end: f64,
    y_init: &[f64; N],
    opts: &DriveOpts,
    stop_dt: Option<f64>,
    on_stop: &mut impl FnMut(f64, &mut [f64; N]) -> Result<()>,
    sink: &mut impl FnMut(&RawStep<N>) -> Result<Flow>,
) -> std::result::Result<DriveStats, DriveError> {
    let mut stats = StepStats::new();
    let mut t = t0;
    let mut y = *y_init;
    let mut k: [[f64; N]; 7] = [[0.0; N]; 7];
    let mut y1 = [0.0; N];

    stats.rhs_evals += 1;
    {
        let (head, _) = k.split_at_mut(1);
        rhs(t, &y, &mut head[0]).map_err(DriveError::Inner)?;
    }
    let k1 = k[0];
    let mut h = initial_step(rhs, t0, &y, &k1, opts, &mut stats.rhs_evals);

    let mut stop_k: u64 = 1;
    let mut facold: f64 = 1e-4;
    let mut reject = false;
    let mut stopped_early = false;
    let t_eps = |x: f64| 1e-14 * x.abs().max(1.0);

    while t < t_end - t_eps(t_end) {
        if stats.accepted + stats.rejected >= MAX_STEPS {
            return Err(DriveError::Budget { t });
        }
        let t_stop = stop_dt.map(|dt| t0 + stop_k as f64 * dt);
        let (t_bound, bound_is_stop) = match t_stop {
            Some(ts) if ts <= t_end => (ts, true),
            _ => (t_end, false),
        };
        let mut h_try = h.min(opts.h_max);
        let mut landed = false;
        if t + h_try >= t_bound - t_eps(t_bound) {
            h_try = t_bound - t;
            landed = true;
        }
        if h_try < H_FLOOR_REL * t.abs().max(1.0) {
            return Err(DriveError::Underflow { t, h: h_try });
        }

        let attempt = try_step(
            rhs,
            t,
            &y,
            h_try,
            &mut k,
            &mut y1,
            opts.rtol,
            opts.atol,
            &mut stats.rhs_evals,
        );
        let err = match attempt {
            Ok(e) => e,
            Err(()) => {
                // Chart singularity or non-finite stage: retry smaller.
                stats.rejected += 1;
                reject = true;
                h = 0.5 * h_try;
                // Stage k[0] was untouched; FSAL value still valid.
                continue;
            }
        };

        let fac11 = err.powf(EXPO1);
        let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(FAC_SHRINK_MAX, FAC_GROW_MAX);
        let hnew = h_try / fac;

        if err <= 1.0 {
            facold = err.max(1e-4);
            stats.accepted += 1;
            stats.h_min = stats.h_min.min(h_try);
            stats.h_max = stats.h_max.max(h_try);
            let t1 = if landed { t_bound } else { t + h_try };
            let rcont = if opts.dense {
                Some(dense_coefficients(&y, &y1, &k, h_try))
            } else {
                None
            };
            let flow = sink(&RawStep { t0: t, h: h_try, t1, y1: &y1, rcont: rcont.as_ref() })
                .map_err(DriveError::Inner)?;
            t = t1;
            y = y1;
            k[0] = k[6];
            if landed && bound_is_stop {
                on_stop(t, &mut y).map_err(DriveError::Inner)?;
                stats.rhs_evals += 1;
                let (head, _) = k.split_at_mut(1);
                rhs(t, &y, &mut head[0]).map_err(DriveError::Inner)?;
                stop_k += 1;
            }
            if matches!(flow, Flow::Stop) {
                stopped_early = true;
                break;
            }
            let mut hn = hnew;
            if reject {
                hn = hn.min(h_try);
            }
            reject = false;
            h = hn;
        } else {
            stats.rejected += 1;
            reject = true;
            h = h_try / (fac11 / SAFE).min(FAC_GROW_MAX);
        }
    }

    Ok(DriveStats { stats, stopped_early })
}

fn validate_tolerances(rtol: f64, atol: f64) -> Result<()> {
    let ok = |x: f64| x.is_finite() && x > 0.0 && x <= 1e-2;
    if !ok(rtol) || !ok(atol) {
        return Err(Error::Tolerance(format!(
            "rtol and atol must lie in (0, 1e-2]; got ({rtol}, {atol})"
        )));
    }
    Ok(())
}

/// Integrate the classical flow from `state0` over [0, t_end].
///
/// The returned trajectory stores one sample per accepted step plus dense
/// output usable by [`Trajectory::state_at`] and
/// [`find_section_crossings`].
pub fn integrate(
    state0: &CanonicalState,
    params: &ModelParams,
    t_end: f64,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory> {
    integrate_inner(state0, params, t_end, rtol, atol, true)
}

fn integrate_inner(
    state0: &CanonicalState,
    params: &ModelParams,
    t_end: f64,
    rtol: f64,
    atol: f64,
    dense: bool,
) -> Result<Trajectory> {
    validate_tolerances(rtol, atol)?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Validation(format!("t_end must be positive, got {t_end}")));
    }
    let (nu, gamma) = (params.nu(), params.gamma());
    let y0 = embed(&state0.as_array());
    let eps0 = energy5(&y0, nu, gamma);

    let mut traj = Trajectory::new(*params);
    traj.times.push(0.0);
    traj.states.push(project5(&y0));
    traj.energies.push(eps0);

    let mut rhs = |_t: f64, y: &[f64; 5], dy: &mut [f64; 5]| -> Result<()> {
        *dy = drift5(y, nu, gamma)?;
        Ok(())
    };
    let opts = DriveOpts { rtol, atol, h_max: t_end, dense };
    let mut drift_max = 0.0f64;
    let denom = eps0.abs().max(1.0);

    let outcome = drive(
        &mut rhs,
        0.0,
        t_end,
        &y0,
        &opts,
        None,
        &mut |_, _| Ok(()),
        &mut |step: &RawStep<5>| {
            let eps = energy5(step.y1, nu, gamma);
            drift_max = drift_max.max((eps - eps0).abs() / denom);
            traj.times.push(step.t1);
            traj.states.push(project5(step.y1));
            traj.energies.push(eps);
            if let Some(rc) = step.rcont {
                traj.segments.push(DenseSegment { t0: step.t0, h: step.h, rcont: *rc });
            }
            Ok(Flow::Continue)
        },
    );
    traj.energy_drift = drift_max;
    match outcome {
        Ok(ds) => {
            traj.stats = ds.stats;
            Ok(traj)
        }
        Err(DriveError::Underflow { t, h }) => {
            Err(Error::StepFailure { t, h, partial: Box::new(traj) })
        }
        Err(DriveError::Budget { t }) => Err(Error::NonConvergence(format!(
            "step budget exhausted at t = {t}"
        ))),
        Err(DriveError::Inner(e)) => Err(e),
    }
}

/// Result of a joint state + tangent-bundle integration: sparse trajectory
/// samples at renormalization boundaries, the tangent basis after each
/// Gram-Schmidt pass, and the per-interval log stretching factors.
#[derive(Debug, Clone)]
pub struct TangentRun {
    pub trajectory: Trajectory,
    /// Renormalization times, multiples of renorm_dt.
    pub renorm_times: Vec<f64>,
    /// ln of the Gram-Schmidt column norms accumulated in each interval.
    pub log_norms: Vec<[f64; 4]>,
    /// Orthonormal embedded-tangent basis (I, psi, lx, ly, lz components)
    /// right after each renormalization.
    pub basis_history: Vec<[[f64; 5]; 4]>,
    /// Number of caller-supplied tangent vectors (the rest are padding).
    pub n_requested: usize,
}

/// Integrate state plus up to four tangent vectors under the linearized
/// flow, reorthonormalizing every `renorm_dt`. Fewer than four requested
/// vectors are padded internally to a full basis; accumulated log-norms for
/// the padding are still reported (volume checks need all four).
pub fn integrate_with_tangent(
    state0: &CanonicalState,
    tangent0: &[Vec4],
    params: &ModelParams,
    t_end: f64,
    renorm_dt: f64,
) -> Result<TangentRun> {
    integrate_with_tangent_tol(
        state0,
        tangent0,
        params,
        t_end,
        renorm_dt,
        DEFAULT_RTOL,
        DEFAULT_ATOL,
    )
}

pub fn integrate_with_tangent_tol(
    state0: &CanonicalState,
    tangent0: &[Vec4],
    params: &ModelParams,
    t_end: f64,
    renorm_dt: f64,
    rtol: f64,
    atol: f64,
) -> Result<TangentRun> {
    validate_tolerances(rtol, atol)?;
    if tangent0.is_empty() || tangent0.len() > 4 {
        return Err(Error::Validation(format!(
            "need 1..=4 tangent vectors, got {}",
            tangent0.len()
        )));
    }
    if !(renorm_dt > 0.0 && t_end > renorm_dt) {
        return Err(Error::Validation(format!(
            "need 0 < renorm_dt < t_end, got ({renorm_dt}, {t_end})"
        )));
    }

    // Build a full orthonormal basis: requested vectors first, padded from
    // the canonical basis, then pushed into the embedded tangent space.
    let n_req = tangent0.len();
    let mut basis: Vec<Vec4> = tangent0.to_vec();
    let mut norms = vec![0.0; n_req];
    if !gram_schmidt(&mut basis, &mut norms) {
        return Err(Error::DegenerateTangent { t: 0.0 });
    }
    for axis in 0..4 {
        if basis.len() == 4 {
            break;
        }
        let mut cand = [0.0; 4];
        cand[axis] = 1.0;
        for b in &basis {
            let proj = dot(&cand, b);
            for i in 0..4 {
                cand[i] -= proj * b[i];
            }
        }
        if norm(&cand) > 1e-8 {
            basis.push(normalized(&cand));
        }
    }
    debug_assert_eq!(basis.len(), 4);

    let (nu, gamma) = (params.nu(), params.gamma());
    let y4 = state0.as_array();
    let mut basis5: Vec<[f64; 5]> = basis.iter().map(|v| tangent_embed(&y4, v)).collect();
    let mut norms5 = [0.0; 4];
    if !gram_schmidt(&mut basis5, &mut norms5) {
        return Err(Error::DegenerateTangent { t: 0.0 });
    }

    let mut y0 = [0.0f64; 25];
    y0[..5].copy_from_slice(&embed(&y4));
    for (v, chunk) in basis5.iter().zip(y0[5..].chunks_mut(5)) {
        chunk.copy_from_slice(v);
    }
    let eps0 = energy5(y0[..5].try_into().unwrap(), nu, gamma);
    let denom = eps0.abs().max(1.0);

    let mut traj = Trajectory::new(*params);
    traj.times.push(0.0);
    traj.states.push(project5(y0[..5].try_into().unwrap()));
    traj.energies.push(eps0);
    let mut run = TangentRun {
        trajectory: Trajectory::new(*params),
        renorm_times: Vec::new(),
        log_norms: Vec::new(),
        basis_history: Vec::new(),
        n_requested: n_req,
    };

    let mut rhs = |_t: f64, y: &[f64; 25], dy: &mut [f64; 25]| -> Result<()> {
        let ys: [f64; 5] = y[..5].try_into().unwrap();
        let d = drift5(&ys, nu, gamma)?;
        let jac = jacobian5(&ys, nu, gamma)?;
        dy[..5].copy_from_slice(&d);
        for v in 0..4 {
            let tv: [f64; 5] = y[5 + 5 * v..10 + 5 * v].try_into().unwrap();
            dy[5 + 5 * v..10 + 5 * v].copy_from_slice(&mat_vec(&jac, &tv));
        }
        Ok(())
    };

    let mut drift_max = 0.0f64;
    let mut degenerate_at: Option<f64> = None;
    let opts = DriveOpts { rtol, atol, h_max: renorm_dt, dense: false };
    let outcome = drive(
        &mut rhs,
        0.0,
        t_end,
        &y0,
        &opts,
        Some(renorm_dt),
        &mut |t: f64, y: &mut [f64; 25]| {
            // Pull the spin back onto the unit sphere and the tangents back
            // into its tangent plane before reorthonormalizing; both
            // constraints are exact for the flow and drift only at
            // integrator-error level.
            let r = (y[2] * y[2] + y[3] * y[3] + y[4] * y[4]).sqrt();
            for i in 2..5 {
                y[i] /= r;
            }
            let l = [y[2], y[3], y[4]];
            let mut vs = [[0.0f64; 5]; 4];
            for (v, chunk) in vs.iter_mut().zip(y[5..].chunks(5)) {
                v.copy_from_slice(chunk);
                let radial = v[2] * l[0] + v[3] * l[1] + v[4] * l[2];
                for i in 0..3 {
                    v[2 + i] -= radial * l[i];
                }
            }
            let mut rs = [0.0; 4];
            if !gram_schmidt(&mut vs, &mut rs) {
                degenerate_at = Some(t);
                return Err(Error::DegenerateTangent { t });
            }
            for (v, chunk) in vs.iter().zip(y[5..].chunks_mut(5)) {
                chunk.copy_from_slice(v);
            }
            let ys: [f64; 5] = y[..5].try_into().unwrap();
            let eps = energy5(&ys, nu, gamma);
            drift_max = drift_max.max((eps - eps0).abs() / denom);
            traj.times.push(t);
            traj.states.push(project5(&ys));
            traj.energies.push(eps);
            run.renorm_times.push(t);
            run.log_norms.push([rs[0].ln(), rs[1].ln(), rs[2].ln(), rs[3].ln()]);
            run.basis_history.push(vs);
            Ok(())
        },
        &mut |_step: &RawStep<25>| Ok(Flow::Continue),
    );

    traj.energy_drift = drift_max;
    match outcome {
        Ok(ds) => {
            traj.stats = ds.stats;
            run.trajectory = traj;
            Ok(run)
        }
        Err(DriveError::Underflow { t, h }) => {
            Err(Error::StepFailure { t, h, partial: Box::new(traj) })
        }
        Err(DriveError::Budget { t }) => Err(Error::NonConvergence(format!(
            "step budget exhausted at t = {t}"
        ))),
        Err(DriveError::Inner(e)) => Err(e),
    }
}

/// Which sign of dpsi/dt a section crossing must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionDirection {
    Up,
    Down,
    Both,
}

/// One crossing of the section psi = psi0 (mod 2 pi).
#[derive(Debug, Clone)]
pub struct SectionEvent {
    pub t: f64,
    pub state: CanonicalState,
    pub bloch: BlochVector,
    /// +1 where dpsi/dt > 0 at the crossing, else -1.
    pub direction: i8,
}

/// Nodes per dense segment when bracketing section crossings.
const EVENT_SUBDIV: usize = 8;

/// Locate crossings of psi = psi0 (mod 2 pi) inside one dense segment and
/// append them to `out`, deduplicating against the last event found.
pub(crate) fn segment_events(
    seg: &DenseSegment<5>,
    nu: f64,
    gamma: f64,
    psi0: f64,
    direction: SectionDirection,
    out: &mut Vec<SectionEvent>,
) {
    let mut nodes_t = [0.0; EVENT_SUBDIV + 1];
    let mut nodes_u = [0.0; EVENT_SUBDIV + 1];
    for j in 0..=EVENT_SUBDIV {
        let t = seg.t0 + seg.h * (j as f64 / EVENT_SUBDIV as f64);
        nodes_t[j] = t;
        nodes_u[j] = (seg.eval_component(1, t) - psi0) / TAU;
    }
    for j in 0..EVENT_SUBDIV {
        let (ua, ub) = (nodes_u[j], nodes_u[j + 1]);
        let (lo, hi) = (ua.min(ub), ua.max(ub));
        let mut m = lo.ceil();
        while m <= hi {
            if (ua - m) * (ub - m) <= 0.0 {
                if let Some(evt) = bisect_event(seg, nu, gamma, psi0, m, nodes_t[j], nodes_t[j + 1])
                {
                    let keep = match direction {
                        SectionDirection::Up => evt.direction > 0,
                        SectionDirection::Down => evt.direction < 0,
                        SectionDirection::Both => true,
                    };
                    let dup = out
                        .last()
                        .is_some_and(|l| (l.t - evt.t).abs() <= 1e-9 * evt.t.abs().max(1.0));
                    if keep && !dup {
                        out.push(evt);
                    }
                }
            }
            m += 1.0;
        }
    }
}

fn bisect_event(
    seg: &DenseSegment<5>,
    nu: f64,
    gamma: f64,
    psi0: f64,
    level: f64,
    ta: f64,
    tb: f64,
) -> Option<SectionEvent> {
    let target = psi0 + level * TAU;
    let f = |t: f64| seg.eval_component(1, t) - target;
    let (mut a, mut b) = (ta, tb);
    let (mut fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        b = a;
    } else if fa * fb > 0.0 {
        return None;
    }
    for _ in 0..80 {
        if (b - a).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fm.abs() < 1e-11 {
            a = mid;
            b = mid;
            break;
        }
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    let t_evt = 0.5 * (a + b);
    let y = seg.eval(t_evt);
    debug_assert!({
        let d = wrap_angle(y[1] - psi0);
        d.min(TAU - d) < 1e-9
    });
    let dpsi = match drift5(&y, nu, gamma) {
        Ok(d) => d[1],
        Err(_) => {
            let dt = seg.h * 1e-6;
            let lo = (t_evt - dt).max(seg.t0);
            let hi = (t_evt + dt).min(seg.t0 + seg.h);
            (seg.eval_component(1, hi) - seg.eval_component(1, lo)) / (hi - lo)
        }
    };
    let state = CanonicalState::from_raw(&project5(&y));
    Some(SectionEvent {
        t: t_evt,
        bloch: state.bloch(),
        state,
        direction: if dpsi > 0.0 { 1 } else { -1 },
    })
}

/// All crossings of the section psi = psi0 (mod 2 pi) with the requested
/// direction of dpsi/dt, located on the trajectory's dense output by
/// bracketing and bisection. A start exactly on the section is an initial
/// condition, not a crossing, and is not reported.
pub fn find_section_crossings(
    traj: &Trajectory,
    psi0: f64,
    direction: SectionDirection,
) -> Result<Vec<SectionEvent>> {
    if !traj.has_dense() {
        return Err(Error::Domain("section crossings need dense output".into()));
    }
    let (nu, gamma) = (traj.params.nu(), traj.params.gamma());
    let mut out = Vec::new();
    for seg in &traj.segments {
        segment_events(seg, nu, gamma, psi0, direction, &mut out);
    }
    let t0 = traj.t0();
    out.retain(|e| e.t - t0 > 1e-9 * t0.abs().max(1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::drift_raw;
    use crate::model::energy;

    fn params(gamma: f64, nu: f64) -> ModelParams {
        ModelParams::from_dimensionless(gamma, nu, 1000.0).unwrap()
    }

    fn state(i: f64, psi: f64, c: f64, phi: f64) -> CanonicalState {
        CanonicalState::new(i, psi, c, phi).unwrap()
    }

    fn angle_dist(a: f64, b: f64) -> f64 {
        let d = wrap_angle(a - b);
        d.min(TAU - d)
    }

    #[test]
    fn decoupled_flow_is_linear() {
        let p = params(0.0, 1.7);
        let s0 = state(2.5, 1.0, 0.3, 0.5);
        let traj = integrate(&s0, &p, 50.0, 1e-9, 1e-11).unwrap();
        let t_end = traj.t_end();
        assert!((t_end - 50.0).abs() < 1e-12);
        let last = traj.states.last().unwrap();
        assert!((last[0] - 2.5).abs() < 1e-9);
        assert!((last[1] - (1.0 - 1.7 * t_end)).abs() < 1e-9);
        assert!((last[2] - 0.3).abs() < 1e-9);
        assert!(angle_dist(last[3], 0.5 + t_end) < 1e-9);
    }

    #[test]
    fn tolerances_validated() {
        let p = params(1.0, 1.0);
        let s = state(1.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            integrate(&s, &p, 1.0, 0.0, 1e-11),
            Err(Error::Tolerance(_))
        ));
        assert!(matches!(
            integrate(&s, &p, 1.0, 1e-9, 0.1),
            Err(Error::Tolerance(_))
        ));
        assert!(matches!(
            integrate(&s, &p, -1.0, 1e-9, 1e-11),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn energy_conserved_on_coupled_run() {
        let p = params(3.0, 1.0);
        let s0 = state(50.0, 0.3, 0.2, 1.0);
        let traj = integrate(&s0, &p, 100.0, 1e-10, 1e-12).unwrap();
        assert!(traj.energy_drift < 1e-9, "drift {}", traj.energy_drift);
        assert!(traj.stats.accepted > 100);
    }

    /// Independent fixed-step RK4 oracle for short-time accuracy.
    fn rk4_reference(y0: [f64; 4], nu: f64, gamma: f64, t_end: f64, n: usize) -> [f64; 4] {
        let h = t_end / n as f64;
        let f = |y: &[f64; 4]| drift_raw(y, nu, gamma).unwrap();
        let mut y = y0;
        for _ in 0..n {
            let k1 = f(&y);
            let mut y2 = [0.0; 4];
            for i in 0..4 {
                y2[i] = y[i] + 0.5 * h * k1[i];
            }
            let k2 = f(&y2);
            for i in 0..4 {
                y2[i] = y[i] + 0.5 * h * k2[i];
            }
            let k3 = f(&y2);
            for i in 0..4 {
                y2[i] = y[i] + h * k3[i];
            }
            let k4 = f(&y2);
            for i in 0..4 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    }

    #[test]
    fn matches_fixed_step_oracle() {
        let p = params(1.5, 1.0);
        let s0 = state(3.0, 0.7, -0.2, 2.0);
        let traj = integrate(&s0, &p, 10.0, 1e-11, 1e-13).unwrap();
        let reference = rk4_reference(s0.as_array(), p.nu(), p.gamma(), 10.0, 200_000);
        let got = traj.states.last().unwrap();
        for i in 0..3 {
            assert!(
                (got[i] - reference[i]).abs() < 1e-7,
                "component {i}: {} vs {}",
                got[i],
                reference[i]
            );
        }
        assert!(angle_dist(got[3], reference[3]) < 1e-7);
    }

    #[test]
    fn dense_output_matches_truncated_run() {
        let p = params(1.5, 1.0);
        let s0 = state(3.0, 0.7, -0.2, 2.0);
        let traj = integrate(&s0, &p, 20.0, 1e-10, 1e-12).unwrap();
        for t_mid in [3.719, 11.03, 17.402] {
            let short = integrate(&s0, &p, t_mid, 1e-12, 1e-13).unwrap();
            let dense = traj.raw_at(t_mid).unwrap();
            let exact = short.states.last().unwrap();
            for i in 0..3 {
                assert!(
                    (dense[i] - exact[i]).abs() < 1e-6,
                    "t={t_mid} component {i}: {} vs {}",
                    dense[i],
                    exact[i]
                );
            }
            assert!(angle_dist(dense[3], exact[3]) < 1e-6);
        }
    }

    #[test]
    fn dense_output_continuous_at_boundaries() {
        let p = params(1.5, 1.0);
        let traj = integrate(&state(3.0, 0.7, -0.2, 2.0), &p, 10.0, 1e-9, 1e-11).unwrap();
        for w in traj.segments.windows(2) {
            let t_b = w[1].t0;
            let left = w[0].eval(t_b);
            let right = w[1].eval(t_b);
            for i in 0..5 {
                assert!((left[i] - right[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn halving_rtol_does_not_worsen_energy_drift() {
        let p = params(1.5, 1.0);
        let s0 = state(5.0, 0.2, 0.1, 0.9);
        let loose = integrate(&s0, &p, 200.0, 1e-6, 1e-8).unwrap();
        let tight = integrate(&s0, &p, 200.0, 5e-7, 1e-8).unwrap();
        assert!(tight.energy_drift <= 2.0 * loose.energy_drift + 1e-14);
    }

    #[test]
    fn determinism_bitwise() {
        let p = params(2.0, 1.3);
        let s0 = state(4.0, 1.0, 0.5, 2.0);
        let a = integrate(&s0, &p, 30.0, 1e-9, 1e-11).unwrap();
        let b = integrate(&s0, &p, 30.0, 1e-9, 1e-11).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn near_pole_start_fails_loudly_with_partial() {
        let p = params(1.0, 1.0);
        let s0 = state(1.5e-10, std::f64::consts::FRAC_PI_4, 0.0, 0.0);
        match integrate(&s0, &p, 10.0, 1e-9, 1e-11) {
            Err(Error::StepFailure { t, partial, .. }) => {
                assert!(t < 1.0);
                assert!(!partial.times.is_empty());
            }
            other => panic!("expected StepFailure, got {other:?}"),
        }
    }

    #[test]
    fn sensitive_dependence_in_chaotic_regime() {
        let p = params(3.0, 1.0);
        let s0 = state(50.0, 0.3, 0.2, 1.0);
        let s1 = state(50.0 + 1e-6, 0.3, 0.2, 1.0);
        let a = integrate(&s0, &p, 100.0, 1e-10, 1e-12).unwrap();
        let b = integrate(&s1, &p, 100.0, 1e-10, 1e-12).unwrap();
        let ya = a.states.last().unwrap();
        let yb = b.states.last().unwrap();
        let sep = ((ya[0] - yb[0]).powi(2) + (ya[2] - yb[2]).powi(2)).sqrt();
        assert!(sep > 1.0, "separation {sep}");
    }

    #[test]
    fn tangent_run_decoupled_has_zero_rates() {
        let p = params(0.0, 1.5);
        let s0 = state(2.0, 0.3, 0.4, 1.0);
        let run = integrate_with_tangent(
            &s0,
            &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            &p,
            200.0,
            1.0,
        )
        .unwrap();
        let t_span = *run.renorm_times.last().unwrap();
        let mut sums = [0.0f64; 4];
        for l in &run.log_norms {
            for i in 0..4 {
                sums[i] += l[i];
            }
        }
        for s in sums {
            assert!((s / t_span).abs() < 1e-3);
        }
    }

    #[test]
    fn tangent_volume_conserved_and_rate_converges() {
        let p = params(3.0, 1.0);
        let s0 = state(50.0, 0.3, 0.2, 1.0);
        let basis = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let run = integrate_with_tangent_tol(&s0, &basis, &p, 2000.0, 1.0, 1e-9, 1e-11).unwrap();
        let n = run.log_norms.len();
        let t_span = *run.renorm_times.last().unwrap();
        let total: f64 = run
            .log_norms
            .iter()
            .map(|l| l.iter().sum::<f64>())
            .sum::<f64>();
        assert!(
            (total / t_span).abs() < 1e-3,
            "volume rate {}",
            total / t_span
        );

        // Leading rate Cauchy over successive post-transient windows.
        let rate = |from: usize, to: usize| -> f64 {
            let dt = run.renorm_times[to - 1] - run.renorm_times[from];
            run.log_norms[from + 1..to].iter().map(|l| l[0]).sum::<f64>() / dt
        };
        let r1 = rate(2 * n / 5, 7 * n / 10);
        let r2 = rate(7 * n / 10, n);
        assert!(r1 > 0.05, "leading rate {r1}");
        assert!(
            (r1 - r2).abs() < 0.05 * 0.5 * (r1 + r2),
            "windows {r1} vs {r2}"
        );
    }

    #[test]
    fn tangent_rejects_degenerate_input() {
        let p = params(1.0, 1.0);
        let s0 = state(1.0, 0.0, 0.0, 0.0);
        let same = [[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
        assert!(matches!(
            integrate_with_tangent(&s0, &same, &p, 10.0, 1.0),
            Err(Error::DegenerateTangent { .. })
        ));
    }

    #[test]
    fn renorm_times_land_exactly() {
        let p = params(1.5, 1.0);
        let s0 = state(3.0, 0.7, -0.2, 2.0);
        let run = integrate_with_tangent(&s0, &[[1.0, 0.0, 0.0, 0.0]], &p, 10.0, 1.0).unwrap();
        assert_eq!(run.renorm_times.len(), 10);
        for (k, t) in run.renorm_times.iter().enumerate() {
            assert_eq!(*t, (k + 1) as f64);
        }
    }

    #[test]
    fn decoupled_crossings_equally_spaced() {
        let nu = 1.3;
        let p = params(0.0, nu);
        let s0 = state(2.0, 0.25, 0.3, 0.0);
        let traj = integrate(&s0, &p, 60.0, 1e-10, 1e-12).unwrap();
        let events = find_section_crossings(&traj, 0.25, SectionDirection::Down).unwrap();
        let period = TAU / nu;
        let expected = (60.0 / period).floor() as usize;
        assert_eq!(events.len(), expected);
        for (k, e) in events.iter().enumerate() {
            assert!(((k + 1) as f64 * period - e.t).abs() < 1e-9, "event {k} at {}", e.t);
            assert_eq!(e.direction, -1);
        }
        let up = find_section_crossings(&traj, 0.25, SectionDirection::Up).unwrap();
        assert!(up.is_empty());
    }

    #[test]
    fn crossings_satisfy_section_invariant() {
        let p = params(1.5, 1.0);
        let s0 = state(3.0, 0.7, -0.2, 2.0);
        let traj = integrate(&s0, &p, 200.0, 1e-9, 1e-11).unwrap();
        let psi0 = 0.7;
        let events = find_section_crossings(&traj, psi0, SectionDirection::Both).unwrap();
        assert!(events.len() > 20);
        for e in &events {
            let d = wrap_angle(e.state.psi - psi0);
            assert!(d.min(TAU - d) < 1e-9, "offset {d} at t={}", e.t);
            let b = e.bloch;
            assert!(b.lx * b.lx + b.ly * b.ly <= 1.0 + 1e-12);
        }
        let down = find_section_crossings(&traj, psi0, SectionDirection::Down).unwrap();
        assert!(down.iter().all(|e| e.direction == -1));
        let up = find_section_crossings(&traj, psi0, SectionDirection::Up).unwrap();
        assert!(up.iter().all(|e| e.direction == 1));
        assert_eq!(down.len() + up.len(), events.len());
    }

    #[test]
    fn dense_states_stay_on_the_sphere() {
        let p = params(1.5, 1.0);
        let s0 = state(0.8, 0.0, -0.9, 0.4);
        let traj = integrate(&s0, &p, 50.0, 1e-9, 1e-11).unwrap();
        let t0 = traj.t0();
        let span = traj.t_end() - t0;
        for k in 0..=2000 {
            let t = t0 + span * k as f64 / 2000.0;
            let y = traj.raw_at(t).unwrap();
            assert!(y[2].abs() <= 1.0 + 1e-12);
            assert!(y[0] >= 0.0);
        }
    }

    #[test]
    fn trajectory_energy_audit_exposed() {
        let p = params(1.5, 1.0);
        let s0 = state(3.0, 0.7, -0.2, 2.0);
        let traj = integrate(&s0, &p, 10.0, 1e-9, 1e-11).unwrap();
        let eps0 = energy(&s0, &p);
        assert!((traj.energies[0] - eps0).abs() <= 1e-14 * eps0.abs().max(1.0));
        assert!(traj.energy_drift >= 0.0);
        assert!(traj.energy_drift < 1e-9);
    }
}
