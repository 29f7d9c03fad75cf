//! Energy-shell geometry and microcanonical statistics: on-shell action
//! roots with density weights, photon-number bounds by three methods, seeded
//! Monte Carlo moment estimation, and the closed-form mean/variance of the
//! photon number.

use crate::error::{Error, Result};
use crate::model::{ModelParams, TAU};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Action roots of the shell equation at fixed (psi, c, phi): zero, one, or
/// two values, ascending, each paired with |dh/dI| (the microcanonical
/// density divides by this).
#[derive(Debug, Clone, Copy)]
pub struct ShellRoots {
    pub count: u8,
    pub i: [f64; 2],
    pub dh_di: [f64; 2],
}

impl ShellRoots {
    const EMPTY: Self = Self { count: 0, i: [0.0; 2], dh_di: [0.0; 2] };

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.count as usize).map(|k| (self.i[k], self.dh_di[k]))
    }
}

/// Solve eps = c + nu I + gamma sqrt(2 nu I) x sqrt(1 - c^2) for I >= 0,
/// with x = cos(psi) cos(phi). Multiplicity follows the sign of x and of
/// eps - c: one root for eps > c, two for x < 0 with eps < c and real
/// discriminant, none otherwise.
pub fn solve_i_on_shell(
    psi: f64,
    c: f64,
    phi: f64,
    eps: f64,
    params: &ModelParams,
) -> ShellRoots {
    let (nu, gamma) = (params.nu(), params.gamma());
    let s2 = 1.0 - c * c;
    if s2 < 0.0 {
        return ShellRoots::EMPTY;
    }
    if gamma == 0.0 {
        let i = (eps - c) / nu;
        if i >= 0.0 {
            return ShellRoots { count: 1, i: [i, 0.0], dh_di: [nu, 0.0] };
        }
        return ShellRoots::EMPTY;
    }
    let xs = psi.cos() * phi.cos() * s2.sqrt();
    let disc = xs * xs + 2.0 * (eps - c) / (gamma * gamma);
    if disc < 0.0 {
        return ShellRoots::EMPTY;
    }
    let sq = disc.sqrt();
    let mut out = ShellRoots::EMPTY;
    // Ascending: the minus branch -xs - sq is the smaller root when kept.
    for y in [-xs - sq, -xs + sq] {
        if y < 0.0 {
            continue;
        }
        let i = gamma * gamma * y * y / (2.0 * nu);
        let dh = if y > 0.0 { nu * sq / y } else { f64::INFINITY };
        if out.count == 1 && i == out.i[0] {
            continue;
        }
        let k = out.count as usize;
        out.i[k] = i;
        out.dh_di[k] = dh;
        out.count += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsMethod {
    Trivial,
    BoundarySearch,
    Asymptotic,
}

/// Accessible window of the action variable on the shell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    pub i_min: f64,
    pub i_max: f64,
    pub method: BoundsMethod,
}

/// Photon-number window on the energy shell.
///
/// Trivial: the on-shell actions at the Bloch poles, (eps -+ 1)/nu.
/// Boundary search: exact extremes, the roots of
/// (nu I)^2 - 2 nu I (eps + gamma^2) + eps^2 - 1 = 0 clamped at I >= 0;
/// equivalently the tangency condition at cos(psi)cos(phi) = +-1.
/// Asymptotic: (eps/nu)(1 +- sqrt(2 gamma^2/eps)), valid for eps >> 1.
pub fn action_bounds(eps: f64, params: &ModelParams, method: BoundsMethod) -> Result<ActionBounds> {
    let (nu, gamma) = (params.nu(), params.gamma());
    if !eps.is_finite() {
        return Err(Error::Domain(format!("non-finite eps {eps}")));
    }
    if eps < params.ground_energy() {
        return Err(Error::Domain(format!(
            "eps = {eps} below the shell minimum {}",
            params.ground_energy()
        )));
    }
    let (i_min, i_max) = match method {
        BoundsMethod::Trivial => (((eps - 1.0) / nu).max(0.0), (eps + 1.0) / nu),
        BoundsMethod::BoundarySearch => {
            let g2 = gamma * gamma;
            let disc = g2 * g2 + 2.0 * eps * g2 + 1.0;
            debug_assert!(disc >= 0.0);
            let sq = disc.sqrt();
            let lo = ((eps + g2 - sq) / nu).max(0.0);
            let hi = (eps + g2 + sq) / nu;
            debug_assert!(on_boundary(lo, eps, nu, gamma) || lo == 0.0);
            debug_assert!(on_boundary(hi, eps, nu, gamma));
            (lo, hi)
        }
        BoundsMethod::Asymptotic => {
            if eps <= 1.0 {
                return Err(Error::Domain(format!(
                    "asymptotic bounds need eps > 1, got {eps}"
                )));
            }
            let w = (2.0 * gamma * gamma / eps).sqrt();
            (((eps / nu) * (1.0 - w)).max(0.0), (eps / nu) * (1.0 + w))
        }
    };
    if i_max < 0.0 {
        return Err(Error::Domain(format!("empty shell at eps = {eps}")));
    }
    Ok(ActionBounds { i_min, i_max, method })
}

/// The boundary-search extremes satisfy |eps - nu I| = sqrt(1 + 2 gamma^2 nu I).
fn on_boundary(i: f64, eps: f64, nu: f64, gamma: f64) -> bool {
    let lhs = (eps - nu * i) * (eps - nu * i);
    let rhs = 1.0 + 2.0 * gamma * gamma * nu * i;
    (lhs - rhs).abs() <= 1e-9 * rhs.max(1.0)
}

/// Self-normalized Monte Carlo estimate of a microcanonical photon moment
/// <(a' a)^m> / j^m = <I^m> on the shell.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate {
    pub m: u32,
    pub value: f64,
    /// Batch-means standard error of the self-normalized ratio.
    pub std_error: f64,
    pub n_samples: u64,
    pub seed: u64,
    /// Effective sample size (sum w)^2 / sum w^2 of the density weights.
    pub ess: f64,
}

const N_BATCHES: u64 = 100;

/// Monte Carlo moment of the microcanonical density: draws (psi, phi, c)
/// uniform, weights each sample by sum over action roots of I^m / |dh/dI|,
/// and returns the ratio against the m = 0 weight (the shell volume
/// cancels). Standard error from 100 batch means; batches own disjoint RNG
/// streams, so results are independent of thread count.
pub fn microcanonical_moment(
    m: u32,
    eps: f64,
    params: &ModelParams,
    n_samples: u64,
    seed: u64,
) -> Result<MomentEstimate> {
    if !(eps > 1.0) {
        return Err(Error::Domain(format!(
            "moment estimation needs eps > 1 (single-root regime), got {eps}"
        )));
    }
    if n_samples < 10_000 {
        return Err(Error::Validation(format!(
            "need n_samples >= 10^4, got {n_samples}"
        )));
    }
    let base = n_samples / N_BATCHES;
    let rem = n_samples % N_BATCHES;

    struct BatchSums {
        w_m: f64,
        w_0: f64,
        w_0_sq: f64,
    }

    let batches: Vec<BatchSums> = (0..N_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let n_b = base + u64::from(b < rem);
            let mut sums = BatchSums { w_m: 0.0, w_0: 0.0, w_0_sq: 0.0 };
            for _ in 0..n_b {
                let psi = rng.random_range(0.0..TAU);
                let phi = rng.random_range(0.0..TAU);
                let c = rng.random_range(-1.0..1.0);
                let roots = solve_i_on_shell(psi, c, phi, eps, params);
                debug_assert_eq!(roots.count, 1);
                let mut wm = 0.0;
                let mut w0 = 0.0;
                for (i, dh) in roots.iter() {
                    wm += i.powi(m as i32) / dh;
                    w0 += 1.0 / dh;
                }
                sums.w_m += wm;
                sums.w_0 += w0;
                sums.w_0_sq += w0 * w0;
            }
            sums
        })
        .collect();

    let (mut tot_m, mut tot_0, mut tot_0_sq) = (0.0, 0.0, 0.0);
    let mut ratios = Vec::with_capacity(N_BATCHES as usize);
    for b in &batches {
        tot_m += b.w_m;
        tot_0 += b.w_0;
        tot_0_sq += b.w_0_sq;
        ratios.push(b.w_m / b.w_0);
    }
    let value = tot_m / tot_0;
    let mean_r = ratios.iter().sum::<f64>() / N_BATCHES as f64;
    let var_r = ratios.iter().map(|r| (r - mean_r) * (r - mean_r)).sum::<f64>()
        / (N_BATCHES - 1) as f64;
    let std_error = (var_r / N_BATCHES as f64).sqrt();
    Ok(MomentEstimate {
        m,
        value,
        std_error,
        n_samples,
        seed,
        ess: tot_0 * tot_0 / tot_0_sq,
    })
}

/// Closed-form microcanonical photon mean and variance, (mean/j,
/// variance/j^2), valid for eps > 1. Evaluated two ways (the moment route
/// M2 - M1^2 and the directly printed variance) and cross-checked to 1e-12.
pub fn photon_mean_variance_closed(eps: f64, params: &ModelParams) -> Result<(f64, f64)> {
    if !(eps > 1.0) {
        return Err(Error::Domain(format!("closed forms need eps > 1, got {eps}")));
    }
    let (nu, gamma) = (params.nu(), params.gamma());
    let g2 = gamma * gamma;
    let mean = (eps + g2 / 3.0) / nu;
    let m2 = (eps * eps + eps * g2 + 0.3 * g2 * g2 + 1.0 / 3.0) / (nu * nu);
    let var_from_moments = m2 - mean * mean;

    // Independent evaluation in physical parameters, as a guard against
    // unit-conversion drift: variance = (1/3)(j/w)^2 (4 e w0 g^2/w
    // + 136 g^4 / (15 w^2) + w0^2), divided by j^2.
    let (w0, w, g) = (params.omega0, params.omega, params.g);
    let var_direct = (4.0 * (eps * w0) * g * g / w + 136.0 * g.powi(4) / (15.0 * w * w)
        + w0 * w0)
        / (3.0 * w * w)
        / (w0 * w0 * w0 * w0);
    let scale = var_direct.abs().max(1.0);
    if (var_from_moments - var_direct).abs() > 1e-12 * scale {
        return Err(Error::Tolerance(format!(
            "variance forms disagree: {var_from_moments} vs {var_direct}"
        )));
    }
    Ok((mean, var_direct))
}
