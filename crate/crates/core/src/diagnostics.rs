//! Spectral and concentration diagnostics.
//!
//! The central quantity is the amplification constant
//!
//! ```text
//! alpha(A) = ||P^-1||_{inf->2} ||P||_inf * f(Lambda)    if |lambda_1| < 1
//!            ||P^-1||_{inf->2} ||P||_inf * e^(rho + 1)  if |lambda_1| <= 1 + rho/T
//! ```
//!
//! with `A = P^-1 Lambda P` the Jordan decomposition and
//!
//! ```text
//! f(Lambda) = e^(1/|lambda_1|) [ (l*-1)/(-log|lambda_1|)
//!                              + (l*-1)!/(-log|lambda_1|)^l* ]
//! ```
//!
//! (`1/(1-lambda_1)` in the diagonalizable case `l* = 1`). `alpha` controls
//! how much past noise can amplify into the state magnitude, which in turn
//! yields the per-system sample-covariance envelopes
//! `lambda_lower = lambda_min(C) T / 4` and
//! `lambda_upper = alpha^2 b^2 T` (stable) or `alpha^2 b^2 T^(2l*+1)`
//! (near-unit regime), and the condition numbers kappa / kappa_infty built
//! from them.
//!
//! Numerical Jordan decomposition is deliberately not attempted: it is
//! discontinuous in the matrix entries. Matrices that are diagonalizable to
//! working precision are handled from their eigendecomposition; defective
//! ones require construction metadata.

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{Eig, SVD};
use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryBundle;
use crate::ensemble::{JordanSpec, SystemEnsemble};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::linalg;

/// Enumerating the sign hypercube is exact but exponential; beyond this
/// dimension the Cauchy-Schwarz row bound is reported instead.
const ENUM_CUTOFF: usize = 16;

/// Eigenvector-matrix condition number below which a matrix is treated as
/// diagonalizable.
const DIAGONALIZABLE_COND: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stable,
    NearUnit,
}

/// Spectral structure of one transition matrix and its amplification
/// constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub spectral_radius: f64,
    pub l_star: usize,
    /// `||P^-1||_{inf->2} ||P||_inf`; an upper bound when `xi_exact` is false.
    pub xi: f64,
    pub xi_exact: bool,
    /// `f(Lambda)` in the stable regime, `e^(rho+1)` near the unit circle.
    pub f_value: f64,
    pub alpha: f64,
    pub regime: Regime,
}

/// `f(Lambda)`: long-run contribution of a noise impulse to the state
/// magnitude, for largest eigenvalue magnitude `lam` in (0, 1) and largest
/// Jordan block size `l_star`.
pub fn f_lambda(l_star: usize, lam: f64) -> Result<f64> {
    if l_star == 0 {
        return Err(Error::InvalidArgument("l_star must be >= 1".into()));
    }
    if !(lam > 0.0 && lam < 1.0) {
        return Err(Error::Domain(format!(
            "f(Lambda) needs 0 < |lambda_1| < 1, got {lam}; use the near-unit branch otherwise"
        )));
    }
    if l_star == 1 {
        return Ok(1.0 / (1.0 - lam));
    }
    let neg_log = -lam.ln();
    let l = l_star as f64;
    // (l*-1)! / (-log lam)^l* computed in log space; stable for large blocks
    let log_tail = statrs::function::gamma::ln_gamma(l) - l * neg_log.ln();
    Ok((1.0 / lam).exp() * ((l - 1.0) / neg_log + log_tail.exp()))
}

/// `||A||_inf`: maximum absolute row sum.
pub fn op_norm_inf(a: ArrayView2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `||A||_{inf->2}` with an exactness flag.
///
/// The maximizer of a convex function over the unit inf-ball sits at a sign
/// vertex, so for `d <= 16` all `2^(d-1)` sign patterns are enumerated
/// (Gray-code order, one column update per step). Larger matrices get the
/// row-wise Cauchy-Schwarz bound `sqrt(sum_i ||row_i||_1^2)`.
pub fn op_norm_inf_to_2(a: ArrayView2<f64>) -> (f64, bool) {
    let d = a.ncols();
    if d == 0 {
        return (0.0, true);
    }
    if d > ENUM_CUTOFF {
        return (op_norm_inf_to_2_bound(a), false);
    }
    let rows = a.nrows();
    // v = all-ones start
    let mut y: Array1<f64> = a.sum_axis(ndarray::Axis(1));
    let mut signs = vec![1.0f64; d];
    let mut best: f64 = y.iter().map(|v| v * v).sum();
    // Gray code over the last d-1 coordinates (v and -v are equivalent)
    let steps = 1u64 << (d - 1);
    let mut gray_prev = 0u64;
    for i in 1..steps {
        let gray = i ^ (i >> 1);
        let flipped = (gray ^ gray_prev).trailing_zeros() as usize + 1;
        gray_prev = gray;
        let delta = -2.0 * signs[flipped];
        signs[flipped] = -signs[flipped];
        for r in 0..rows {
            y[r] += delta * a[(r, flipped)];
        }
        let cand: f64 = y.iter().map(|v| v * v).sum();
        if cand > best {
            best = cand;
        }
    }
    (best.sqrt(), true)
}

fn op_norm_inf_to_2_bound(a: ArrayView2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| {
            let l1: f64 = r.iter().map(|v| v.abs()).sum();
            l1 * l1
        })
        .sum::<f64>()
        .sqrt()
}

fn complex_inf_norm(a: &Array2<ndarray_linalg::c64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn complex_inf_to_2_bound(a: &Array2<ndarray_linalg::c64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| {
            let l1: f64 = r.iter().map(|z| z.norm()).sum();
            l1 * l1
        })
        .sum::<f64>()
        .sqrt()
}

fn assemble(
    spectral_radius: f64,
    l_star: usize,
    xi: f64,
    xi_exact: bool,
    rho: f64,
    t_len: usize,
) -> Result<SpectralSummary> {
    // tolerate eigensolver rounding on radii rescaled to land exactly on a
    // target (unit roots come out at 1 +/- few ulp)
    let budget = (1.0 + rho / t_len as f64) * (1.0 + 1e-9);
    if spectral_radius < 1.0 {
        let f_value = if l_star == 1 {
            1.0 / (1.0 - spectral_radius)
        } else {
            f_lambda(l_star, spectral_radius)?
        };
        Ok(SpectralSummary {
            spectral_radius,
            l_star,
            xi,
            xi_exact,
            f_value,
            alpha: xi * f_value,
            regime: Regime::Stable,
        })
    } else if spectral_radius <= budget {
        let f_value = (rho + 1.0).exp();
        Ok(SpectralSummary {
            spectral_radius,
            l_star,
            xi,
            xi_exact,
            f_value,
            alpha: xi * f_value,
            regime: Regime::NearUnit,
        })
    } else {
        Err(Error::Domain(format!(
            "spectral radius {spectral_radius} exceeds 1 + rho/T = {}",
            1.0 + rho / t_len as f64
        )))
    }
}

/// Amplification constant from construction metadata `(P, spec)`, as
/// returned by `build_from_jordan`. Exact for any block structure.
pub fn alpha_from_jordan(
    p: &Array2<f64>,
    spec: &JordanSpec,
    rho: f64,
    t_len: usize,
) -> Result<SpectralSummary> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    if p.nrows() != spec.dim() || p.ncols() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "P is {}x{}, spec dimension is {}",
            p.nrows(),
            p.ncols(),
            spec.dim()
        )));
    }
    let p_inv = linalg::inverse(p)?;
    let (n_inv, exact) = op_norm_inf_to_2(p_inv.view());
    let xi = n_inv * op_norm_inf(p.view());
    assemble(spec.spectral_radius(), spec.largest_block(), xi, exact, rho, t_len)
}

/// Amplification constant straight from a matrix.
///
/// Requires `A` diagonalizable to working precision (eigenvector condition
/// number below 1e8); defective matrices must go through
/// [`alpha_from_jordan`].
pub fn alpha_from_matrix(a: &Array2<f64>, rho: f64, t_len: usize) -> Result<SpectralSummary> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    let (eigs, vecs) = a.eig()?;
    let spectral_radius = eigs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let (_, svals, _) = vecs.svd(false, false)?;
    let smax = svals.iter().fold(0.0_f64, |acc, &s| acc.max(s));
    let smin = svals.iter().fold(f64::INFINITY, |acc, &s| acc.min(s));
    let cond = smax / smin;
    if !cond.is_finite() || cond > DIAGONALIZABLE_COND {
        return Err(Error::JordanUnavailable {
            system: None,
            detail: format!(
                "eigenvector condition number {cond:.3e} exceeds {DIAGONALIZABLE_COND:.0e}; \
                 supply Jordan construction metadata"
            ),
        });
    }
    // A = V Lambda V^-1, so P = V^-1 in the `A = P^-1 Lambda P` convention.
    let max_imag = eigs.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let (xi, xi_exact) = if max_imag <= 1e-9 * spectral_radius.max(1.0) {
        // real spectrum: take the real eigenvector basis for exact norms
        let v_re = vecs.mapv(|z| z.re);
        let p = linalg::inverse(&v_re)?;
        let (n_inv, exact) = op_norm_inf_to_2(v_re.view());
        (n_inv * op_norm_inf(p.view()), exact)
    } else {
        use ndarray_linalg::Inverse;
        let p = vecs.inv()?;
        (complex_inf_to_2_bound(&vecs) * complex_inf_norm(&p), false)
    };
    assemble(spectral_radius, 1, xi, xi_exact, rho, t_len)
}

/// Noise truncation level `b_T(delta) = sqrt(2 sigma^2 log(2 d M T / delta))`.
pub fn b_t(sigma_sq: f64, d: usize, num_systems: usize, t_len: usize, delta: f64) -> f64 {
    (2.0 * sigma_sq * (2.0 * (d * num_systems * t_len) as f64 / delta).ln()).sqrt()
}

/// Per-system covariance facts and their theory envelopes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemCovarianceRow {
    pub m: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lower_theory: f64,
    pub upper_theory: f64,
    pub kappa_m: f64,
    pub lower_held: bool,
    pub upper_held: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub per_system: Vec<SystemCovarianceRow>,
    pub summaries: Vec<SpectralSummary>,
    /// `min_m lower_theory`
    pub lambda_lower: f64,
    /// `max_m upper_theory`
    pub lambda_upper: f64,
    /// `max_m kappa_m`
    pub kappa: f64,
    /// `lambda_upper / lambda_lower`
    pub kappa_infty: f64,
    pub delta: f64,
    pub rho: f64,
}

impl CovarianceReport {
    pub fn to_json(&self) -> Result<String> {
        jsonfmt::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV rows `m,lmin,lmax,lower_theory,upper_theory,kappa_m,lower_held,upper_held`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "m",
            "lmin",
            "lmax",
            "lower_theory",
            "upper_theory",
            "kappa_m",
            "lower_held",
            "upper_held",
        ])?;
        for row in &self.per_system {
            w.write_record([
                row.m.to_string(),
                jsonfmt::fmt_f64(row.lambda_min),
                jsonfmt::fmt_f64(row.lambda_max),
                jsonfmt::fmt_f64(row.lower_theory),
                jsonfmt::fmt_f64(row.upper_theory),
                jsonfmt::fmt_f64(row.kappa_m),
                row.lower_held.to_string(),
                row.upper_held.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
    }
}

/// Sample covariance `Sigma_m = sum_{t=0}^{T-1} x(t) x(t)'` of one system.
pub fn sample_covariance(bundle: &TrajectoryBundle, m: usize) -> Array2<f64> {
    let x = bundle.trajectory(m).regressors();
    x.t().dot(&x)
}

/// Compare the per-system sample covariances against the theory envelopes.
///
/// `alpha` is taken from construction metadata when the ensemble carries it,
/// otherwise from the eigendecomposition of each `A_m`; defective systems
/// without metadata are an error.
pub fn covariance_report(
    bundle: &TrajectoryBundle,
    ensemble: &SystemEnsemble,
    delta: f64,
    rho: f64,
) -> Result<CovarianceReport> {
    if bundle.num_systems() != ensemble.num_systems() {
        return Err(Error::DimensionMismatch(format!(
            "bundle has {} systems, ensemble has {}",
            bundle.num_systems(),
            ensemble.num_systems()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0,1), got {delta}")));
    }
    let t_len = bundle.num_steps();
    let d = bundle.d();
    let num_systems = bundle.num_systems();
    let noise = bundle.noise();
    let lambda_min_c = noise.lambda_min()?;
    let lower_theory = lambda_min_c * t_len as f64 / 4.0;

    let mut per_system = Vec::with_capacity(num_systems);
    let mut summaries = Vec::with_capacity(num_systems);
    for m in 0..num_systems {
        let summary =
            alpha_from_matrix(ensemble.transition(m), rho, t_len).map_err(|e| e.tag_system(m))?;
        let sigma = sample_covariance(bundle, m);
        let (lmin, lmax) = linalg::sym_eig_extremes(&sigma)?;
        let x0_inf = linalg::inf_norm_vec(bundle.trajectory(m).states().row(0));
        let b_bar = b_t(noise.sigma_sq(), d, num_systems, t_len, delta / 3.0) + x0_inf;
        let growth = match summary.regime {
            Regime::Stable => t_len as f64,
            Regime::NearUnit => (t_len as f64).powi(2 * summary.l_star as i32 + 1),
        };
        let upper_theory = summary.alpha * summary.alpha * b_bar * b_bar * growth;
        let kappa_m = if lower_theory > 0.0 { upper_theory / lower_theory } else { f64::INFINITY };
        per_system.push(SystemCovarianceRow {
            m,
            lambda_min: lmin,
            lambda_max: lmax,
            lower_theory,
            upper_theory,
            kappa_m,
            lower_held: lower_theory > 0.0 && lmin >= lower_theory,
            upper_held: lmax <= upper_theory,
        });
        summaries.push(summary);
    }
    let lambda_lower = per_system.iter().map(|r| r.lower_theory).fold(f64::INFINITY, f64::min);
    let lambda_upper = per_system.iter().map(|r| r.upper_theory).fold(0.0, f64::max);
    let kappa = per_system.iter().map(|r| r.kappa_m).fold(0.0, f64::max);
    let kappa_infty = if lambda_lower > 0.0 { lambda_upper / lambda_lower } else { f64::INFINITY };
    Ok(CovarianceReport {
        per_system,
        summaries,
        lambda_lower,
        lambda_upper,
        kappa,
        kappa_infty,
        delta,
        rho,
    })
}

/// Mean squared Frobenius estimation error against an ensemble's true
/// transition matrices (deviations included).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    per_system_fro_sq: Vec<f64>,
    mean: f64,
    method: String,
}

impl ErrorReport {
    pub fn per_system_fro_sq(&self) -> &[f64] {
        &self.per_system_fro_sq
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn method(&self) -> &str {
        &self.method
    }
}

pub fn estimation_error(
    a_hat: &[Array2<f64>],
    ensemble: &SystemEnsemble,
    method: &str,
) -> Result<ErrorReport> {
    if a_hat.len() != ensemble.num_systems() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} systems",
            a_hat.len(),
            ensemble.num_systems()
        )));
    }
    let d = ensemble.d();
    let mut per_system_fro_sq = Vec::with_capacity(a_hat.len());
    for (m, est) in a_hat.iter().enumerate() {
        if est.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "estimate {m} is {}x{}, expected {d}x{d}",
                est.nrows(),
                est.ncols()
            )));
        }
        per_system_fro_sq.push(linalg::frobenius_sq((est - ensemble.transition(m)).view()));
    }
    let mean = per_system_fro_sq.iter().sum::<f64>() / per_system_fro_sq.len() as f64;
    Ok(ErrorReport { per_system_fro_sq, mean, method: method.to_string() })
}

/// Outcome of the three noise concentration events for one bundle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseEvents {
    /// `max_{t,m} ||eta_m(t)||_inf <= b_T(delta)`
    pub e_bdd: bool,
    /// `(3/4) lambda_min(C) I <= (1/T) sum_t eta eta' <= (5/4) lambda_max(C) I`
    /// for every system
    pub e_eta: bool,
    /// total noise magnitude `||Z||_F^2` under its high-probability envelope
    pub e_z: bool,
}

/// Check the truncation, covariance-concentration, and total-magnitude noise
/// events on a bundle whose simulator retained the draws.
///
/// The `E_Z` envelope is `MT tr(C) + 2 sqrt(MT tr(C^2) s) + 2 lambda_max(C) s`
/// with `s = log(2/delta)`: the Laurent-Massart quadratic-form bound, which
/// guarantees the stated `1 - delta` coverage. A plain additive `log(2/delta)`
/// term is smaller than the central fluctuations of `||Z||_F^2` at any
/// realistic `M T`, and the event would sit near probability 1/2.
pub fn noise_event_check(bundle: &TrajectoryBundle, delta: f64) -> Result<NoiseEvents> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0,1), got {delta}")));
    }
    let draws = bundle.noise_draws()?;
    let noise = bundle.noise();
    let d = bundle.d();
    let t_len = bundle.num_steps();
    let num_systems = bundle.num_systems();

    let bound = b_t(noise.sigma_sq(), d, num_systems, t_len, delta);
    let max_inf = draws
        .iter()
        .flat_map(|n| n.rows().into_iter().map(linalg::inf_norm_vec).collect::<Vec<_>>())
        .fold(0.0_f64, f64::max);
    let e_bdd = max_inf <= bound;

    let lambda_min_c = noise.lambda_min()?;
    let (_, lambda_max_c) = linalg::sym_eig_extremes(noise.covariance())?;
    let mut e_eta = true;
    for n in draws {
        let emp = n.t().dot(n) / t_len as f64;
        let (lo, hi) = linalg::sym_eig_extremes(&emp)?;
        if lo < 0.75 * lambda_min_c || hi > 1.25 * lambda_max_c {
            e_eta = false;
            break;
        }
    }

    let z_sq: f64 = draws.iter().map(|n| n.iter().map(|v| v * v).sum::<f64>()).sum();
    let trace_c = noise.covariance().diag().sum();
    let trace_c2 = linalg::frobenius_sq(noise.covariance().view());
    let mt = (num_systems * t_len) as f64;
    let s = (2.0 / delta).ln();
    let z_bound = mt * trace_c + 2.0 * (mt * trace_c2 * s).sqrt() + 2.0 * lambda_max_c * s;
    let e_z = z_sq <= z_bound;

    Ok(NoiseEvents { e_bdd, e_eta, e_z })
}

/// Empirical frequency of each event across replicate bundles.
pub fn noise_event_frequencies<I>(bundles: I) -> Result<(f64, f64, f64)>
where
    I: IntoIterator<Item = NoiseEvents>,
{
    let mut n = 0usize;
    let (mut bdd, mut eta, mut z) = (0usize, 0usize, 0usize);
    for ev in bundles {
        n += 1;
        bdd += ev.e_bdd as usize;
        eta += ev.e_eta as usize;
        z += ev.e_z as usize;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no replicates".into()));
    }
    Ok((bdd as f64 / n as f64, eta as f64 / n as f64, z as f64 / n as f64))
}

/// Least-squares slope of `log ||x(t)||` against `log t` over `t` in
/// `[T/2, T]`; `None` when too few finite points exist.
pub fn growth_slope(log_norms: &[(usize, Option<f64>)]) -> Option<f64> {
    let t_max = log_norms.iter().map(|&(t, _)| t).max()?;
    let points: Vec<(f64, f64)> = log_norms
        .iter()
        .filter(|&&(t, v)| t >= t_max.div_ceil(2) && t >= 1 && v.is_some())
        .map(|&(t, v)| ((t as f64).ln(), v.unwrap()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
