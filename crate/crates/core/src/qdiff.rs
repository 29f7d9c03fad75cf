//! Quantum diffusion projected onto the co-moving stable/unstable frame:
//! the reduced 2x2 diffusion series along a trajectory and the variance
//! convolutions against the contracting and expanding Lyapunov kernels.
//!
//! The stable and unstable directions of the flow are far from orthogonal
//! over long stretches, so "variance of the stable coordinate" must be
//! read off in the oblique decomposition dx = s e_s + u e_u + ..., exactly
//! as in the kicked-top reduction: the coefficient s is extracted with the
//! dual covector w of e_s (w . e_s = 1, w annihilating the other three
//! frame directions), its variance contracts by the exact squared
//! per-interval stretch of e_s under the linearized flow, and the
//! injection is w^T (2D) w. Unit-vector projection with a fixed-rate
//! kernel misreads oblique stretches and drives the accumulated variance
//! negative; the fixed-kernel convolutions are kept for the homogeneous
//! limit where both reductions agree.

use crate::chaos::{push_tangent_chart, CovariantFrame};
use crate::dynamics::{diffusion_raw, DiffusionMatrix4, QuasiprobKind};
use crate::error::{Error, Result};
use crate::integrate::Trajectory;
use crate::linalg::{dot, quad_form, solve, Vec4};
use crate::model::ModelParams;

/// Upper-left block of C^T D C sampled along a trajectory: the diffusion
/// rates seen by the stable and unstable directions, carrying the 1/j
/// scale of the underlying matrix.
#[derive(Debug, Clone)]
pub struct ReducedDiffusion {
    pub times: Vec<f64>,
    pub d_ss: Vec<f64>,
    pub d_su: Vec<f64>,
    pub d_uu: Vec<f64>,
}

impl ReducedDiffusion {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Variance of a deflection convolved against a Lyapunov kernel.
#[derive(Debug, Clone)]
pub struct VarianceSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub lambda: f64,
    pub var0: f64,
}

/// Project one diffusion matrix onto the frame at sample `k`, returning
/// (D_ss, D_su, D_uu). The quadratic form is cross-checked against the
/// spectral sum over eigenpairs in debug builds.
pub fn project_diffusion(d: &DiffusionMatrix4, frame: &CovariantFrame, k: usize) -> (f64, f64, f64) {
    let (es, eu) = (&frame.e_s[k], &frame.e_u[k]);
    let d_ss = quad_form(es, &d.m, es);
    let d_su = quad_form(es, &d.m, eu);
    let d_uu = quad_form(eu, &d.m, eu);
    debug_assert!(
        {
            let (vals, vecs) = d.eigen();
            let spectral: f64 = (0..4)
                .map(|mu| {
                    let p = dot(es, &vecs[mu]);
                    p * p * vals[mu]
                })
                .sum();
            (spectral - d_ss).abs() < 1e-12
        },
        "spectral and quadratic-form projections disagree"
    );
    (d_ss, d_su, d_uu)
}

/// Reduced diffusion series on the frame's grid: D of the requested
/// quasiprobability kind evaluated at the trajectory point of each frame
/// sample and projected onto (e_s, e_u).
pub fn dss_series(
    traj: &Trajectory,
    frame: &CovariantFrame,
    params: &ModelParams,
    kind: QuasiprobKind,
) -> Result<ReducedDiffusion> {
    let (nu, gamma, j) = (params.nu(), params.gamma(), params.j);
    let n = frame.len();
    let mut out = ReducedDiffusion {
        times: frame.times.clone(),
        d_ss: Vec::with_capacity(n),
        d_su: Vec::with_capacity(n),
        d_uu: Vec::with_capacity(n),
    };
    for k in 0..n {
        let y = traj.raw_at(frame.times[k])?;
        let d = DiffusionMatrix4 { m: diffusion_raw(&y, nu, gamma, j, kind)? };
        let (ss, su, uu) = project_diffusion(&d, frame, k);
        out.d_ss.push(ss);
        out.d_su.push(su);
        out.d_uu.push(uu);
    }
    Ok(out)
}

fn uniform_dt(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 samples for a variance series, got {}",
            times.len()
        )));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::Grid(format!("non-increasing sample times, dt = {dt}")));
    }
    for w in times.windows(2) {
        let d = w[1] - w[0];
        if (d - dt).abs() > 1e-9 * dt {
            return Err(Error::Grid(format!(
                "non-uniform sampling: {d} vs {dt} at t = {}",
                w[0]
            )));
        }
    }
    Ok(dt)
}

fn kernel_variance(
    times: &[f64],
    d: &[f64],
    two_lambda_dt: f64,
    lambda: f64,
    var0: f64,
) -> Result<VarianceSeries> {
    if !(lambda > 0.0) || !(var0 >= 0.0) {
        return Err(Error::Validation(format!(
            "need lambda > 0 and var0 >= 0, got ({lambda}, {var0})"
        )));
    }
    let dt = uniform_dt(times)?;
    let q = (two_lambda_dt * dt).exp();
    let mut values = Vec::with_capacity(times.len());
    let mut var = var0;
    values.push(var);
    for w in d.windows(2) {
        var = q * var + dt * (q * w[0] + w[1]);
        values.push(var);
    }
    Ok(VarianceSeries { times: times.to_vec(), values, lambda, var0 })
}

/// Variance of the stable deflection: the trapezoidal convolution of
/// 2 D_ss against the contracting kernel e^{-2 lambda (t - t')}, seeded
/// with var0, evaluated incrementally on the uniform sample grid.
pub fn stable_variance(dss: &ReducedDiffusion, lambda: f64, var0: f64) -> Result<VarianceSeries> {
    kernel_variance(&dss.times, &dss.d_ss, -2.0 * lambda, lambda, var0)
}

/// Variance of the unstable deflection: same convolution with the
/// expanding kernel e^{+2 lambda (t - t')} and D_uu.
pub fn unstable_variance(dss: &ReducedDiffusion, lambda: f64, var0: f64) -> Result<VarianceSeries> {
    kernel_variance(&dss.times, &dss.d_uu, 2.0 * lambda, lambda, var0)
}

/// Stable-coefficient variance accumulated in the oblique frame (module
/// docs): dual-covector injection rates, exact per-interval stretches of
/// e_s, and the resulting variance samples.
#[derive(Debug, Clone)]
pub struct CovariantVariance {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Injection rate w^T D w at each sample.
    pub d_dual: Vec<f64>,
    /// ln of the stretch of e_s over each grid interval.
    pub log_stretch: Vec<f64>,
    /// Mean contraction rate of e_s over the window, from the stretches.
    pub lambda: f64,
    pub var0: f64,
}

impl CovariantVariance {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// First sample time with a negative accumulated variance.
    pub fn first_negative(&self) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.values)
            .find(|(_, &v)| v < 0.0)
            .map(|(t, _)| *t)
    }
}

/// Dual covector of e_s at sample `k`: the solution of C^T w = (1,0,0,0),
/// so w . e_s = 1 and w annihilates e_u, e_eps, e_tau.
fn dual_covector(frame: &CovariantFrame, k: usize) -> Result<Vec4> {
    let rows = [frame.e_s[k], frame.e_u[k], frame.e_eps[k], frame.e_tau[k]];
    solve(&rows, &[1.0, 0.0, 0.0, 0.0]).ok_or(Error::DegenerateTangent { t: frame.times[k] })
}

/// Accumulate the stable-coefficient variance along the frame's grid with
/// the oblique reduction: var' = sigma^2 var + injection, where sigma is
/// the stretch of e_s pushed through the linearized flow over one grid
/// interval and read off with the dual covector at arrival, and the
/// injection is the trapezoidal contribution of w^T (2D) w.
pub fn covariant_stable_variance(
    traj: &Trajectory,
    frame: &CovariantFrame,
    params: &ModelParams,
    kind: QuasiprobKind,
    var0: f64,
) -> Result<CovariantVariance> {
    if !(var0 >= 0.0) {
        return Err(Error::Validation(format!("need var0 >= 0, got {var0}")));
    }
    let dt = uniform_dt(&frame.times)?;
    let (nu, gamma, j) = (params.nu(), params.gamma(), params.j);
    let n = frame.len();

    let mut duals = Vec::with_capacity(n);
    let mut d_dual = Vec::with_capacity(n);
    for k in 0..n {
        let w = dual_covector(frame, k)?;
        let y = traj.raw_at(frame.times[k])?;
        let d = diffusion_raw(&y, nu, gamma, j, kind)?;
        d_dual.push(quad_form(&w, &d, &w));
        duals.push(w);
    }

    let mut values = Vec::with_capacity(n);
    let mut log_stretch = Vec::with_capacity(n - 1);
    let mut var = var0;
    values.push(var);
    for k in 0..n - 1 {
        let pushed =
            push_tangent_chart(traj, params, frame.times[k], frame.times[k + 1], &frame.e_s[k])?;
        let sigma = dot(&duals[k + 1], &pushed);
        if !(sigma.abs() > 1e-300) {
            return Err(Error::DegenerateTangent { t: frame.times[k + 1] });
        }
        log_stretch.push(sigma.abs().ln());
        let q = sigma * sigma;
        var = q * var + dt * (q * d_dual[k] + d_dual[k + 1]);
        values.push(var);
    }
    let lambda = -log_stretch.iter().sum::<f64>() / ((n - 1) as f64 * dt);
    Ok(CovariantVariance { times: frame.times.clone(), values, d_dual, log_stretch, lambda, var0 })
}

/// First sample time at which the stable variance of the P-function
/// diffusion turns negative, if it does within the frame's window.
pub fn p_function_negativity(
    traj: &Trajectory,
    frame: &CovariantFrame,
    params: &ModelParams,
    lambda: f64,
    var0: f64,
) -> Result<Option<f64>> {
    let dss = dss_series(traj, frame, params, QuasiprobKind::P)?;
    let var = stable_variance(&dss, lambda, var0)?;
    Ok(var
        .times
        .iter()
        .zip(&var.values)
        .find(|(_, &v)| v < 0.0)
        .map(|(t, _)| *t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::covariant_frame_grid;
    use crate::integrate::integrate;
    use crate::linalg::{gram_schmidt, norm, Vec4};
    use crate::model::{CanonicalState, ModelParams};

    fn chaotic_setup(j: f64) -> (Trajectory, ModelParams, CovariantFrame) {
        let p = ModelParams::from_dimensionless(3.0, 1.0, j).unwrap();
        let s0 = CanonicalState::new(50.0, 0.3, 0.2, 1.0).unwrap();
        let traj = integrate(&s0, &p, 200.0, 1e-9, 1e-11).unwrap();
        let frame = covariant_frame_grid(&traj, &p, 60.0, 0.2).unwrap();
        (traj, p, frame)
    }

    fn hand_frame(times: Vec<f64>, e_s: Vec4, e_u: Vec4) -> CovariantFrame {
        let n = times.len();
        CovariantFrame {
            times,
            grid_dt: 0.1,
            e_s: vec![e_s; n],
            e_u: vec![e_u; n],
            e_eps: vec![[0.0, 0.0, 1.0, 0.0]; n],
            e_tau: vec![[0.0, 0.0, 0.0, 1.0]; n],
        }
    }

    fn sample_matrix() -> DiffusionMatrix4 {
        let p = ModelParams::from_dimensionless(1.5, 1.0, 1000.0).unwrap();
        let s = CanonicalState::new(8.0, 0.7, 0.3, 1.9).unwrap();
        crate::dynamics::diffusion_matrix(&s, &p, QuasiprobKind::Q).unwrap()
    }

    #[test]
    fn eigenvector_projection_recovers_eigenvalue() {
        let d = sample_matrix();
        let (vals, vecs) = d.eigen();
        for mu in 0..4 {
            let frame = hand_frame(vec![0.0], vecs[mu], vecs[(mu + 1) % 4]);
            let (d_ss, _, d_uu) = project_diffusion(&d, &frame, 0);
            assert!((d_ss - vals[mu]).abs() < 1e-12, "mu = {mu}");
            assert!((d_uu - vals[(mu + 1) % 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormalized_frame_trace_vanishes() {
        let (traj, p, frame) = chaotic_setup(1000.0);
        let y = traj.raw_at(frame.times[0]).unwrap();
        let d = diffusion_raw(&y, p.nu(), p.gamma(), p.j, QuasiprobKind::Q).unwrap();
        let mut basis =
            [frame.e_s[0], frame.e_u[0], frame.e_eps[0], frame.e_tau[0]];
        let mut norms = [0.0; 4];
        assert!(gram_schmidt(&mut basis, &mut norms));
        let trace: f64 = basis.iter().map(|e| quad_form(e, &d, e)).sum();
        assert!(trace.abs() < 1e-10, "trace {trace}");
    }

    #[test]
    fn p_series_is_negated_q_series() {
        let (traj, p, frame) = chaotic_setup(1000.0);
        let q = dss_series(&traj, &frame, &p, QuasiprobKind::Q).unwrap();
        let pp = dss_series(&traj, &frame, &p, QuasiprobKind::P).unwrap();
        assert_eq!(q.len(), frame.len());
        for k in 0..q.len() {
            assert_eq!(pp.d_ss[k], -q.d_ss[k]);
            assert_eq!(pp.d_uu[k], -q.d_uu[k]);
        }
    }

    #[test]
    fn series_scales_inversely_with_j() {
        let (traj, p1, frame) = chaotic_setup(1000.0);
        let p2 = ModelParams::from_dimensionless(3.0, 1.0, 2000.0).unwrap();
        let a = dss_series(&traj, &frame, &p1, QuasiprobKind::Q).unwrap();
        let b = dss_series(&traj, &frame, &p2, QuasiprobKind::Q).unwrap();
        for k in 0..a.len() {
            assert_eq!(2.0 * b.d_ss[k], a.d_ss[k]);
            assert_eq!(2.0 * b.d_su[k], a.d_su[k]);
        }
    }

    #[test]
    fn frame_vectors_stay_unit_under_projection_inputs() {
        let (_, _, frame) = chaotic_setup(1000.0);
        for k in 0..frame.len() {
            assert!((norm(&frame.e_s[k]) - 1.0).abs() < 1e-10);
            assert!((norm(&frame.e_u[k]) - 1.0).abs() < 1e-10);
        }
    }

    fn hand_series(d: f64, n: usize, dt: f64) -> ReducedDiffusion {
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        ReducedDiffusion {
            d_ss: vec![d; n],
            d_su: vec![0.0; n],
            d_uu: vec![d; n],
            times,
        }
    }

    #[test]
    fn zero_diffusion_decays_homogeneously() {
        let dss = hand_series(0.0, 200, 0.05);
        let v = stable_variance(&dss, 1.0, 0.25).unwrap();
        for (t, x) in v.times.iter().zip(&v.values) {
            let exact = 0.25 * (-2.0 * t).exp();
            assert!((x - exact).abs() < 1e-12 * 0.25, "t = {t}");
        }
    }

    #[test]
    fn constant_diffusion_reaches_fixed_point() {
        let lambda = 0.4;
        let d = 3e-3;
        let dss = hand_series(d, 2000, 0.05 / lambda);
        let v = stable_variance(&dss, lambda, 0.0).unwrap();
        let target = d / lambda;
        let last = *v.values.last().unwrap();
        assert!((last - target).abs() < 5e-3 * target, "{last} vs {target}");
    }

    #[test]
    fn unstable_variance_grows_past_var0() {
        let dss = hand_series(2e-3, 400, 0.1);
        let v = unstable_variance(&dss, 0.5, 1e-4).unwrap();
        for (k, x) in v.values.iter().enumerate().skip(1) {
            assert!(*x > v.var0, "sample {k} fell to {x}");
        }
        let mono = v.values.windows(2).all(|w| w[1] > w[0]);
        assert!(mono);
    }

    #[test]
    fn immediate_negativity_with_negative_integrand() {
        let mut dss = hand_series(-1.0, 50, 0.05);
        dss.d_ss = vec![-1.0; 50];
        let v = stable_variance(&dss, 1.0, 0.0).unwrap();
        assert_eq!(v.values[0], 0.0);
        assert!(v.values[1] < 0.0);
    }

    #[test]
    fn rejects_bad_grids_and_parameters() {
        let mut dss = hand_series(1e-3, 50, 0.05);
        assert!(matches!(
            stable_variance(&dss, 0.0, 0.1),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            stable_variance(&dss, 1.0, -0.1),
            Err(Error::Validation(_))
        ));
        dss.times[20] += 1e-3;
        assert!(matches!(stable_variance(&dss, 1.0, 0.1), Err(Error::Grid(_))));
        let short = hand_series(0.0, 1, 0.05);
        assert!(matches!(
            stable_variance(&short, 1.0, 0.1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dual_covector_is_dual_to_the_frame() {
        let e_s = [0.8, 0.6, 0.0, 0.0];
        let e_u = [0.6, 0.8, 0.0, 0.0];
        let mut frame = hand_frame(vec![0.0], e_s, e_u);
        frame.e_eps = vec![[0.0, 0.1, 0.99, 0.0]];
        let w = dual_covector(&frame, 0).unwrap();
        assert!((dot(&w, &frame.e_s[0]) - 1.0).abs() < 1e-12);
        assert!(dot(&w, &frame.e_u[0]).abs() < 1e-12);
        assert!(dot(&w, &frame.e_eps[0]).abs() < 1e-12);
        assert!(dot(&w, &frame.e_tau[0]).abs() < 1e-12);
    }

    #[test]
    fn dual_covector_reduces_to_projection_for_orthonormal_frames() {
        let d = sample_matrix();
        let (_, vecs) = d.eigen();
        let frame = CovariantFrame {
            times: vec![0.0],
            grid_dt: 0.1,
            e_s: vec![vecs[0]],
            e_u: vec![vecs[1]],
            e_eps: vec![vecs[2]],
            e_tau: vec![vecs[3]],
        };
        let w = dual_covector(&frame, 0).unwrap();
        for i in 0..4 {
            assert!((w[i] - vecs[0][i]).abs() < 1e-12);
        }
        let (d_ss, _, _) = project_diffusion(&d, &frame, 0);
        assert!((quad_form(&w, &d.m, &w) - d_ss).abs() < 1e-12);
    }

    #[test]
    fn dual_covector_rejects_collapsed_frames() {
        let e = [0.8, 0.6, 0.0, 0.0];
        let frame = hand_frame(vec![0.0], e, e);
        assert!(matches!(
            dual_covector(&frame, 0),
            Err(Error::DegenerateTangent { .. })
        ));
    }

    #[test]
    fn chaotic_q_variance_stays_positive() {
        let (traj, p, frame) = chaotic_setup(1000.0);
        let dss = dss_series(&traj, &frame, &p, QuasiprobKind::Q).unwrap();
        let positive = dss.d_ss.iter().filter(|&&x| x > 0.0).count();
        assert!(
            positive as f64 > 0.6 * dss.len() as f64,
            "{positive} of {} positive",
            dss.len()
        );
        let var0 = 1.0 / (2.0 * p.j);
        let v = covariant_stable_variance(&traj, &frame, &p, QuasiprobKind::Q, var0).unwrap();
        assert_eq!(v.len(), frame.len());
        assert!(v.lambda > 0.0, "stable direction should contract, lambda = {}", v.lambda);
        assert!(v.first_negative().is_none(), "went negative at {:?}", v.first_negative());
        let p_var = covariant_stable_variance(&traj, &frame, &p, QuasiprobKind::P, var0).unwrap();
        let p_cross = p_var.first_negative();
        assert!(p_cross.is_some());
        assert!(p_cross.unwrap() > frame.times[0]);
    }
}
