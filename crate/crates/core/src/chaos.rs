//! Chaos diagnostics: Benettin Lyapunov spectra, covariant stable/unstable
//! frames assembled into the projection matrix C, energy-shell initial
//! condition sampling, and Poincare section scans with coverage metrics.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{
    cotangent_embed, cotangent_project, drift5, drift_raw, embed, jacobian5, tangent_embed,
    tangent_project,
};
use crate::error::{Error, Result};
use crate::integrate::{
    drive, integrate_with_tangent_tol, segment_events, DenseSegment, DriveError, DriveOpts, Flow,
    RawStep, SectionDirection, SectionEvent, Trajectory, DEFAULT_ATOL, DEFAULT_RTOL,
};
use crate::linalg::{dot, mat_vec, norm, normalized, normalized3, Mat4, Vec4};
use crate::model::{CanonicalState, ModelParams, TAU};
use crate::shell::solve_i_on_shell;

/// Window estimates of the leading exponent below this magnitude are
/// treated as consistent with zero instead of compared in relative terms.
const LYAPUNOV_ZERO_FLOOR: f64 = 1e-2;
/// Number of post-transient windows used for the convergence history.
const LYAPUNOV_WINDOWS: usize = 4;

/// Benettin spectrum of the four-dimensional flow, exponents descending.
#[derive(Debug, Clone)]
pub struct LyapunovSpectrum {
    pub exponents: [f64; 4],
    /// Per-window exponent estimates over the post-transient region.
    pub window_estimates: Vec<[f64; 4]>,
    /// (start, end) times of each window.
    pub window_spans: Vec<(f64, f64)>,
    pub t_transient: f64,
    pub t_total: f64,
}

impl LyapunovSpectrum {
    pub fn lambda_max(&self) -> f64 {
        self.exponents[0]
    }
}

/// Full Lyapunov spectrum by joint tangent-bundle integration with
/// Gram-Schmidt renormalization, discarding the first 10% of the run as
/// transient. Fails if the standard error of the per-window estimates of
/// the leading exponent exceeds 10% of their mean (a mean consistent with
/// zero is exempt: window estimates of a vanishing exponent only decay like
/// 1/t), or if the run turns out shorter than 100 Lyapunov times.
pub fn lyapunov_spectrum(
    state0: &CanonicalState,
    params: &ModelParams,
    t_total: f64,
    renorm_dt: f64,
) -> Result<LyapunovSpectrum> {
    if !(renorm_dt > 0.0) || !(t_total >= 20.0 * renorm_dt) {
        return Err(Error::Validation(format!(
            "need renorm_dt > 0 and t_total >= 20 renorm_dt, got ({renorm_dt}, {t_total})"
        )));
    }
    let basis = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let run = integrate_with_tangent_tol(
        state0,
        &basis,
        params,
        t_total,
        renorm_dt,
        DEFAULT_RTOL,
        DEFAULT_ATOL,
    )?;
    let n = run.log_norms.len();
    let skip = n.div_ceil(10);
    if n - skip < LYAPUNOV_WINDOWS * 2 {
        return Err(Error::Validation(format!(
            "only {n} renormalizations; too few for a windowed estimate"
        )));
    }
    let time_at = |idx: usize| -> f64 {
        if idx == 0 {
            0.0
        } else {
            run.renorm_times[idx - 1]
        }
    };
    let rate_over = |from: usize, to: usize| -> [f64; 4] {
        let span = time_at(to) - time_at(from);
        let mut acc = [0.0; 4];
        for l in &run.log_norms[from..to] {
            for i in 0..4 {
                acc[i] += l[i];
            }
        }
        acc.map(|a| a / span)
    };

    let mut exponents = rate_over(skip, n);
    exponents.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut window_estimates = Vec::with_capacity(LYAPUNOV_WINDOWS);
    let mut window_spans = Vec::with_capacity(LYAPUNOV_WINDOWS);
    let block = (n - skip) / LYAPUNOV_WINDOWS;
    for w in 0..LYAPUNOV_WINDOWS {
        let from = skip + w * block;
        let to = if w + 1 == LYAPUNOV_WINDOWS { n } else { from + block };
        let mut est = rate_over(from, to);
        est.sort_by(|a, b| b.partial_cmp(a).unwrap());
        window_estimates.push(est);
        window_spans.push((time_at(from), time_at(to)));
    }
    let leads: Vec<f64> = window_estimates.iter().map(|w| w[0]).collect();
    let mean = leads.iter().sum::<f64>() / leads.len() as f64;
    if mean.abs() > LYAPUNOV_ZERO_FLOOR {
        let var = leads.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / (leads.len() - 1) as f64;
        let se = (var / leads.len() as f64).sqrt();
        if se > 0.1 * mean.abs() {
            return Err(Error::NonConvergence(format!(
                "leading-exponent window estimates {leads:?} have standard error \
                 {se:.2e}, above 10% of their mean {mean:.2e}"
            )));
        }
    }
    let lambda = exponents[0];
    if lambda > LYAPUNOV_ZERO_FLOOR && lambda * t_total < 100.0 {
        return Err(Error::NonConvergence(format!(
            "t_total = {t_total} is below 100 Lyapunov times (1/lambda = {})",
            1.0 / lambda
        )));
    }
    Ok(LyapunovSpectrum {
        exponents,
        window_estimates,
        window_spans,
        t_transient: time_at(skip),
        t_total,
    })
}

pub const DEFAULT_FRAME_DT: f64 = 0.1;
/// Forward vectors started from two different seeds must agree within this
/// angle (radians) everywhere on the reporting window.
const SEED_ANGLE_TOL: f64 = 1e-3;
const FRAME_SEED_A: Vec4 = [0.77, 0.21, -0.53, 0.34];
const FRAME_SEED_B: Vec4 = [-0.29, 0.68, 0.40, -0.55];

/// Per-time unit directions of the flow: stable, unstable, shell normal,
/// and flow direction, plus the stable dual covector, sampled on a uniform
/// grid inside the trajectory's inner window.
#[derive(Debug, Clone)]
pub struct CovariantFrame {
    pub times: Vec<f64>,
    pub grid_dt: f64,
    pub e_s: Vec<Vec4>,
    pub e_u: Vec<Vec4>,
    pub e_eps: Vec<Vec4>,
    pub e_tau: Vec<Vec4>,
    /// Unit covector dual to `e_s`, converged under the forward adjoint
    /// flow. Up to scale it annihilates every tangent direction the flow
    /// keeps clear of the stable one (e_u, e_tau, and the transported
    /// energy direction), which makes it the transport-consistent way to
    /// read off stable components.
    pub w_s: Vec<Vec4>,
}

impl CovariantFrame {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The matrix C with columns (e_s, e_u, e_eps, e_tau) at sample `k`.
    pub fn matrix(&self, k: usize) -> Mat4 {
        let cols = [&self.e_s[k], &self.e_u[k], &self.e_eps[k], &self.e_tau[k]];
        let mut m = [[0.0; 4]; 4];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..4 {
                m[i][j] = col[i];
            }
        }
        m
    }
}

/// Covariant frame along a stored trajectory, sampled every
/// [`DEFAULT_FRAME_DT`]: e_u from forward tangent propagation converged over
/// [0, t_conv], e_s from reversed-time propagation converged over
/// [t_end - t_conv, t_end], w_s from forward adjoint propagation (the
/// fastest-growing covector is the stable dual), e_eps along the energy
/// gradient, e_tau along the drift. Reported only on
/// [t_conv, t_end - t_conv].
pub fn covariant_frame(
    traj: &Trajectory,
    params: &ModelParams,
    t_conv: f64,
) -> Result<CovariantFrame> {
    covariant_frame_grid(traj, params, t_conv, DEFAULT_FRAME_DT)
}

pub fn covariant_frame_grid(
    traj: &Trajectory,
    params: &ModelParams,
    t_conv: f64,
    grid_dt: f64,
) -> Result<CovariantFrame> {
    if !traj.has_dense() {
        return Err(Error::Domain("covariant frame needs dense output".into()));
    }
    if !(t_conv > 0.0 && grid_dt > 0.0) {
        return Err(Error::Validation(format!(
            "need t_conv > 0 and grid_dt > 0, got ({t_conv}, {grid_dt})"
        )));
    }
    let (t0, t_end) = (traj.t0(), traj.t_end());
    let duration = t_end - t0;
    if duration <= 2.0 * t_conv {
        return Err(Error::Validation(format!(
            "trajectory duration {duration} too short for t_conv = {t_conv}"
        )));
    }
    let a = t0 + t_conv;
    let k_max = ((duration - 2.0 * t_conv) / grid_dt * (1.0 + 1e-12)).floor() as usize;
    if k_max < 1 {
        return Err(Error::Validation(format!(
            "inner window shorter than one grid step {grid_dt}"
        )));
    }

    let fwd_a = tangent_records(traj, params, &FRAME_SEED_A, false, false, a, grid_dt, k_max)?;
    let fwd_b = tangent_records(traj, params, &FRAME_SEED_B, false, false, a, grid_dt, k_max)?;
    check_seed_agreement(&fwd_a, &fwd_b, a, grid_dt, "forward")?;
    let bwd_a = tangent_records(traj, params, &FRAME_SEED_A, true, false, a, grid_dt, k_max)?;
    let bwd_b = tangent_records(traj, params, &FRAME_SEED_B, true, false, a, grid_dt, k_max)?;
    check_seed_agreement(&bwd_a, &bwd_b, a, grid_dt, "backward")?;
    let adj_a = tangent_records(traj, params, &FRAME_SEED_A, false, true, a, grid_dt, k_max)?;
    let adj_b = tangent_records(traj, params, &FRAME_SEED_B, false, true, a, grid_dt, k_max)?;
    check_seed_agreement(&adj_a, &adj_b, a, grid_dt, "stable dual")?;

    let (nu, gamma) = (params.nu(), params.gamma());
    let mut frame = CovariantFrame {
        times: Vec::with_capacity(k_max + 1),
        grid_dt,
        e_s: bwd_a,
        e_u: fwd_a,
        e_eps: Vec::with_capacity(k_max + 1),
        e_tau: Vec::with_capacity(k_max + 1),
        w_s: adj_a,
    };
    for k in 0..=k_max {
        let t = a + k as f64 * grid_dt;
        let y = traj.raw_at(t)?;
        let d = drift_raw(&y, nu, gamma)?;
        let speed = norm(&d);
        if speed < 1e-14 {
            return Err(Error::Domain(format!("flow stationary at t = {t}")));
        }
        // Gradient components read off the symplectic drift, so
        // <grad eps, e_tau> vanishes exactly.
        let grad = [-d[1], d[0], d[3], -d[2]];
        frame.times.push(t);
        frame.e_eps.push(normalized(&grad));
        frame.e_tau.push(normalized(&d));
    }
    Ok(frame)
}

fn check_seed_agreement(
    va: &[Vec4],
    vb: &[Vec4],
    a: f64,
    dt: f64,
    label: &str,
) -> Result<()> {
    for (k, (x, y)) in va.iter().zip(vb).enumerate() {
        let cosang = dot(x, y).abs().min(1.0);
        let angle = cosang.acos();
        if angle > SEED_ANGLE_TOL {
            return Err(Error::NonConvergence(format!(
                "{label} tangent seeds disagree by {angle:.2e} rad at t = {}",
                a + k as f64 * dt
            )));
        }
    }
    Ok(())
}

/// Propagate one tangent vector or covector along the stored trajectory
/// under the linearized flow (reversed integrates the negated field from
/// the far end; adjoint transports a covector, whose pairings with tangents
/// are invariant), normalizing at every grid stop, and return unit chart
/// components at t = a + k dt for k in 0..=k_max. Transport runs in the
/// embedded (co)tangent space, where the linearization stays bounded
/// through pole passages; the chart components are read off at the grid
/// stops only. Reversed records arrive reversed and are flipped before
/// returning.
fn tangent_records(
    traj: &Trajectory,
    params: &ModelParams,
    v0: &Vec4,
    reversed: bool,
    adjoint: bool,
    a: f64,
    dt: f64,
    k_max: usize,
) -> Result<Vec<Vec4>> {
    let (nu, gamma) = (params.nu(), params.gamma());
    let (t0, t_end) = (traj.t0(), traj.t_end());
    let b = a + k_max as f64 * dt;

    // Drive time s maps to trajectory time t = s (forward) or t_end - s
    // (reversed).
    let to_t = |s: f64| if reversed { t_end - s } else { s };
    let (warm_from, warm_to) = if reversed { (0.0, t_end - b) } else { (t0, a) };
    // Same expression the driver uses for its stop schedule, so the final
    // record lands bitwise-exactly; the drive is cut there by the sink
    // rather than by its (slightly overshot) end time.
    let last_stop = warm_to + k_max as f64 * dt;

    let mut rhs = |s: f64, v: &[f64; 5], dv: &mut [f64; 5]| -> Result<()> {
        let y = traj.raw5_at(to_t(s))?;
        let jac = jacobian5(&y, nu, gamma)?;
        if adjoint {
            for (i, x) in dv.iter_mut().enumerate() {
                *x = -(0..5).map(|k| jac[k][i] * v[k]).sum::<f64>();
            }
        } else {
            *dv = mat_vec(&jac, v);
        }
        if reversed {
            for x in dv.iter_mut() {
                *x = -*x;
            }
        }
        Ok(())
    };
    let opts = DriveOpts { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, h_max: dt, dense: false };
    let map_err = |e: DriveError| match e {
        DriveError::Underflow { t, h } => Error::NonConvergence(format!(
            "tangent propagation step underflow at s = {t}, h = {h}"
        )),
        DriveError::Budget { t } => {
            Error::NonConvergence(format!("tangent propagation step budget at s = {t}"))
        }
        DriveError::Inner(e) => e,
    };
    // Normalize and pin the spin part onto the tangent plane of the sphere;
    // the constraint is exact for the transport and drifts only at
    // integrator-error level. For covectors the spin-radial component is
    // pure gauge and gets dropped by the same projection.
    let sanitize = |s: f64, w: &mut [f64; 5]| -> Result<()> {
        let y = traj.raw5_at(to_t(s))?;
        let l = normalized3(&[y[2], y[3], y[4]]);
        let radial = w[2] * l[0] + w[3] * l[1] + w[4] * l[2];
        for i in 0..3 {
            w[2 + i] -= radial * l[i];
        }
        *w = normalized(w);
        Ok(())
    };
    let chart_record = |s: f64, w: &[f64; 5]| -> Result<Vec4> {
        let y = traj.raw5_at(to_t(s))?;
        let chart =
            if adjoint { cotangent_project(&y, w)? } else { tangent_project(&y, w)? };
        Ok(normalized(&chart))
    };

    let y_from = traj.raw_at(to_t(warm_from))?;
    let mut v =
        if adjoint { cotangent_embed(&y_from, v0) } else { tangent_embed(&y_from, v0) };
    sanitize(warm_from, &mut v)?;
    let v_warm = v;
    if warm_to > warm_from {
        drive(
            &mut rhs,
            warm_from,
            warm_to,
            &v_warm,
            &opts,
            Some(dt),
            &mut |s, y: &mut [f64; 5]| sanitize(s, y),
            &mut |step: &RawStep<5>| {
                v = *step.y1;
                Ok(Flow::Continue)
            },
        )
        .map_err(map_err)?;
    }
    sanitize(warm_to, &mut v)?;

    let mut records = Vec::with_capacity(k_max + 1);
    records.push(chart_record(warm_to, &v)?);
    let v_win = v;
    drive(
        &mut rhs,
        warm_to,
        last_stop + 0.5 * dt,
        &v_win,
        &opts,
        Some(dt),
        &mut |s, y: &mut [f64; 5]| {
            sanitize(s, y)?;
            records.push(chart_record(s, y)?);
            Ok(())
        },
        &mut |step: &RawStep<5>| {
            Ok(if step.t1 >= last_stop { Flow::Stop } else { Flow::Continue })
        },
    )
    .map_err(map_err)?;
    if records.len() != k_max + 1 {
        return Err(Error::NonConvergence(format!(
            "tangent propagation recorded {} of {} grid points",
            records.len(),
            k_max + 1
        )));
    }
    if reversed {
        records.reverse();
    }
    Ok(records)
}

/// Push one chart tangent vector from `t_from` to `t_to` along the stored
/// trajectory under the exact linearized flow, without renormalizing, and
/// return its raw chart components at arrival. Meant for short spans (a few
/// grid steps); longer pushes risk overflow along unstable directions.
pub(crate) fn push_tangent_chart(
    traj: &Trajectory,
    params: &ModelParams,
    t_from: f64,
    t_to: f64,
    v0: &Vec4,
) -> Result<Vec4> {
    if !(t_to > t_from) {
        return Err(Error::Validation(format!(
            "need t_from < t_to, got ({t_from}, {t_to})"
        )));
    }
    let (nu, gamma) = (params.nu(), params.gamma());
    let mut rhs = |s: f64, v: &[f64; 5], dv: &mut [f64; 5]| -> Result<()> {
        let jac = jacobian5(&traj.raw5_at(s)?, nu, gamma)?;
        *dv = mat_vec(&jac, v);
        Ok(())
    };
    let opts =
        DriveOpts { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, h_max: t_to - t_from, dense: false };
    let v0_embedded = tangent_embed(&traj.raw_at(t_from)?, v0);
    let mut v = v0_embedded;
    drive(
        &mut rhs,
        t_from,
        t_to,
        &v0_embedded,
        &opts,
        None,
        &mut |_s, _y: &mut [f64; 5]| Ok(()),
        &mut |step: &RawStep<5>| {
            v = *step.y1;
            Ok(Flow::Continue)
        },
    )
    .map_err(|e| match e {
        DriveError::Underflow { t, h } => {
            Error::NonConvergence(format!("tangent push step underflow at t = {t}, h = {h}"))
        }
        DriveError::Budget { t } => {
            Error::NonConvergence(format!("tangent push step budget at t = {t}"))
        }
        DriveError::Inner(e) => e,
    })?;
    tangent_project(&traj.raw5_at(t_to)?, &v)
}

/// Maximum rejection-sampling attempts before the shell is declared empty.
const SHELL_MAX_ATTEMPTS: u64 = 1_000_000;

/// Draw a state uniformly in (psi, phi, c) conditioned on the shell having
/// an action root there; of two roots one is picked uniformly. `region`
/// restricts the c-draw. Roots inside the integrator's singularity guards
/// (a measure-zero sliver) are rejected like rootless draws.
pub fn sample_on_shell(
    eps: f64,
    params: &ModelParams,
    rng_seed: u64,
    region: Option<(f64, f64)>,
) -> Result<CanonicalState> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_on_shell_rng(eps, params, &mut rng, region)
}

pub(crate) fn sample_on_shell_rng(
    eps: f64,
    params: &ModelParams,
    rng: &mut ChaCha8Rng,
    region: Option<(f64, f64)>,
) -> Result<CanonicalState> {
    let (lo, hi) = region.unwrap_or((-1.0, 1.0));
    if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::Validation(format!(
            "need -1 <= lo < hi <= 1 for the c-region, got ({lo}, {hi})"
        )));
    }
    for _ in 0..SHELL_MAX_ATTEMPTS {
        let psi = rng.random_range(0.0..TAU);
        let phi = rng.random_range(0.0..TAU);
        let c = rng.random_range(lo..hi);
        let roots = solve_i_on_shell(psi, c, phi, eps, params);
        let pick = match roots.count {
            0 => continue,
            1 => 0,
            _ => rng.random_range(0..2usize),
        };
        let i = roots.i[pick];
        if i < 1e-9 || 1.0 - c.abs() < 1e-8 {
            continue;
        }
        return CanonicalState::new(i, psi, c, phi);
    }
    Err(Error::EmptyShell { attempts: SHELL_MAX_ATTEMPTS })
}

/// One section crossing reduced to the transverse-spin pair.
#[derive(Debug, Clone, Copy)]
pub struct ScanPoint {
    pub t: f64,
    pub lx: f64,
    pub ly: f64,
    pub northern: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanStatus {
    Complete,
    Partial(String),
}

#[derive(Debug, Clone)]
pub struct ScanTrajectory {
    pub initial: CanonicalState,
    pub points: Vec<ScanPoint>,
    pub status: ScanStatus,
}

/// Section scan over several on-shell initial conditions.
#[derive(Debug, Clone)]
pub struct PoincareScan {
    pub eps: f64,
    pub gamma: f64,
    pub nu: f64,
    pub psi0: f64,
    pub seed: u64,
    pub trajectories: Vec<ScanTrajectory>,
}

/// Integrate `n_traj` on-shell initial conditions, collecting up to
/// `n_events` crossings of psi = psi0 (mod 2 pi) each, in the direction of
/// the oscillator clock (dpsi/dt < 0). Trajectories run in parallel on
/// per-index RNG streams; a trajectory that fails or runs out of its time
/// budget reports Partial status with whatever it gathered.
pub fn poincare_scan(
    eps: f64,
    params: &ModelParams,
    n_traj: usize,
    n_events: usize,
    psi0: f64,
    seed: u64,
) -> Result<PoincareScan> {
    if n_traj == 0 || n_events == 0 {
        return Err(Error::Validation(format!(
            "need n_traj >= 1 and n_events >= 1, got ({n_traj}, {n_events})"
        )));
    }
    let (nu, gamma) = (params.nu(), params.gamma());
    let t_budget = 40.0 + 3.0 * (n_events as f64 + 5.0) * TAU / nu;

    let trajectories: Vec<ScanTrajectory> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let initial = match sample_on_shell_rng(eps, params, &mut rng, None) {
                Ok(s) => s,
                Err(e) => {
                    return ScanTrajectory {
                        initial: CanonicalState::new(1.0, 0.0, 0.0, 0.0).unwrap(),
                        points: Vec::new(),
                        status: ScanStatus::Partial(format!("sampling failed: {e}")),
                    }
                }
            };
            let (points, status) = scan_one(&initial, nu, gamma, psi0, n_events, t_budget);
            ScanTrajectory { initial, points, status }
        })
        .collect();

    Ok(PoincareScan { eps, gamma, nu, psi0, seed, trajectories })
}

fn scan_one(
    initial: &CanonicalState,
    nu: f64,
    gamma: f64,
    psi0: f64,
    n_events: usize,
    t_budget: f64,
) -> (Vec<ScanPoint>, ScanStatus) {
    let mut events: Vec<SectionEvent> = Vec::with_capacity(n_events + 4);
    let mut rhs = |_t: f64, y: &[f64; 5], dy: &mut [f64; 5]| -> Result<()> {
        *dy = drift5(y, nu, gamma)?;
        Ok(())
    };
    let opts =
        DriveOpts { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, h_max: t_budget, dense: true };
    let outcome = drive(
        &mut rhs,
        0.0,
        t_budget,
        &embed(&initial.as_array()),
        &opts,
        None,
        &mut |_, _| Ok(()),
        &mut |step: &RawStep<5>| {
            let seg = DenseSegment { t0: step.t0, h: step.h, rcont: *step.rcont.unwrap() };
            segment_events(&seg, nu, gamma, psi0, SectionDirection::Down, &mut events);
            Ok(if events.len() >= n_events { Flow::Stop } else { Flow::Continue })
        },
    );
    events.truncate(n_events);
    let points: Vec<ScanPoint> = events
        .iter()
        .map(|e| {
            let b = e.bloch;
            debug_assert!(b.lx * b.lx + b.ly * b.ly <= 1.0 + 1e-12);
            ScanPoint { t: e.t, lx: b.lx, ly: b.ly, northern: e.state.c >= 0.0 }
        })
        .collect();
    let status = match outcome {
        Ok(_) if points.len() >= n_events => ScanStatus::Complete,
        Ok(_) => ScanStatus::Partial(format!(
            "{} of {n_events} events within t = {t_budget}",
            points.len()
        )),
        Err(DriveError::Underflow { t, .. }) => {
            ScanStatus::Partial(format!("integration stalled near a pole at t = {t}"))
        }
        Err(DriveError::Budget { t }) => {
            ScanStatus::Partial(format!("step budget exhausted at t = {t}"))
        }
        Err(DriveError::Inner(e)) => ScanStatus::Partial(e.to_string()),
    };
    (points, status)
}

/// Fourier harmonics fitted to the radial profile in [`thin_curve_ratio`].
const CURVE_HARMONICS: usize = 6;

/// Residual-to-extent ratio quantifying whether a section's point set lies
/// on a thin curve: the rms residual of a low-order Fourier fit r(theta)
/// around the centroid, divided by the major principal extent. Regular
/// sections give values near zero; chaotic blobs give O(1).
pub fn thin_curve_ratio(points: &[(f64, f64)]) -> Result<f64> {
    let dim = 2 * CURVE_HARMONICS + 1;
    if points.len() < 2 * dim {
        return Err(Error::Validation(format!(
            "need at least {} points for the curve fit, got {}",
            2 * dim,
            points.len()
        )));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;

    let mut basis = vec![0.0; dim];
    let mut ata = vec![vec![0.0f64; dim]; dim];
    let mut atr = vec![0.0f64; dim];
    let polar: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let (dx, dy) = (p.0 - cx, p.1 - cy);
            (dy.atan2(dx), (dx * dx + dy * dy).sqrt())
        })
        .collect();
    for &(theta, r) in &polar {
        basis[0] = 1.0;
        for k in 1..=CURVE_HARMONICS {
            let (s, c) = (k as f64 * theta).sin_cos();
            basis[2 * k - 1] = c;
            basis[2 * k] = s;
        }
        for i in 0..dim {
            for j in 0..dim {
                ata[i][j] += basis[i] * basis[j];
            }
            atr[i] += basis[i] * r;
        }
    }
    let coef = solve_symmetric(&mut ata, &mut atr).ok_or_else(|| {
        Error::NonConvergence("thin-curve normal equations are singular".into())
    })?;

    let mut ss = 0.0;
    for &(theta, r) in &polar {
        let mut fit = coef[0];
        for k in 1..=CURVE_HARMONICS {
            let (s, c) = (k as f64 * theta).sin_cos();
            fit += coef[2 * k - 1] * c + coef[2 * k] * s;
        }
        ss += (r - fit) * (r - fit);
    }
    let resid_rms = (ss / n).sqrt();

    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let major_var = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
    if major_var <= 0.0 {
        return Err(Error::NonConvergence("degenerate point set".into()));
    }
    Ok(resid_rms / major_var.sqrt())
}

/// Gaussian elimination with partial pivoting; returns None on a singular
/// system. Both inputs are consumed as scratch.
fn solve_symmetric(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 * scale.max(1.0) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Occupied cells of a `grid` x `grid` partition of [-1, 1]^2.
pub fn occupied_cells(points: &[(f64, f64)], grid: usize) -> HashSet<(u16, u16)> {
    let mut cells = HashSet::new();
    let g = grid as f64;
    for p in points {
        let ix = (((p.0 + 1.0) / 2.0 * g).floor() as i64).clamp(0, grid as i64 - 1);
        let iy = (((p.1 + 1.0) / 2.0 * g).floor() as i64).clamp(0, grid as i64 - 1);
        cells.insert((ix as u16, iy as u16));
    }
    cells
}
