//! Transition-matrix estimators.
//!
//! `ols_fit` estimates each system separately from its own trajectory.
//! `joint_fit` pools all systems and factorizes the stacked parameter as a
//! mixture of `k` shared basis matrices with per-system weights, minimizing
//! the averaged one-step squared prediction loss
//!
//! ```text
//! L(W, B) = 1/(MT) sum_m sum_{t=0}^{T-1} || x_m(t+1) - (sum_i B[i,m] W_i) x_m(t) ||^2
//! ```
//!
//! The loss is biconvex in `(W, B)`; alternating least squares solves each
//! half exactly, so the recorded loss trace is non-increasing. A gradient
//! descent optimizer is available behind the same configuration for parity
//! with minibatch implementations.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryBundle;
use crate::ensemble::compose_transition;
use crate::error::{Error, Result};
use crate::linalg;
use crate::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Als,
    Gd,
}

/// Ridge policy for the normal-equation solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgePolicy {
    /// `epsilon = scale * trace(Gram) / dim` per subproblem.
    Adaptive { scale: f64 },
    /// Fixed epsilon; `0.0` disables regularization entirely.
    Fixed(f64),
}

impl RidgePolicy {
    fn epsilon(&self, gram_trace: f64, dim: usize) -> f64 {
        match *self {
            RidgePolicy::Adaptive { scale } => scale * gram_trace / dim as f64,
            RidgePolicy::Fixed(eps) => eps,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            RidgePolicy::Adaptive { scale } => scale,
            RidgePolicy::Fixed(eps) => eps,
        };
        if v >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("ridge must be >= 0, got {v}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub max_iters: usize,
    /// Relative loss-decrease threshold per full iteration.
    pub tol: f64,
    pub restarts: usize,
    pub ridge: RidgePolicy,
    pub init_seed: u64,
    /// Learning rate, gradient-descent optimizer only.
    pub gd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Als,
            max_iters: 500,
            tol: 1e-8,
            restarts: 1,
            ridge: RidgePolicy::Adaptive { scale: 1e-8 },
            init_seed: 0,
            gd_step: 1e-3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        if self.optimizer == Optimizer::Gd && !(self.gd_step > 0.0) {
            return Err(Error::InvalidArgument(format!("gd_step must be > 0, got {}", self.gd_step)));
        }
        self.ridge.validate()
    }
}

/// Per-system ordinary least squares.
#[derive(Debug, Clone)]
pub struct OlsFit {
    a_hat: Vec<Array2<f64>>,
    ridge_used: f64,
    /// Sum of squared one-step residua per system.
    per_system_residual: Vec<f64>,
}

impl OlsFit {
    pub fn a_hat(&self) -> &[Array2<f64>] {
        &self.a_hat
    }

    pub fn ridge_used(&self) -> f64 {
        self.ridge_used
    }

    pub fn per_system_residual(&self) -> &[f64] {
        &self.per_system_residual
    }
}

/// Joint shared-basis fit.
#[derive(Debug, Clone)]
pub struct JointFit {
    w_hat: Vec<Array2<f64>>,
    b_hat: Array2<f64>,
    a_hat: Vec<Array2<f64>>,
    /// Loss after the initial point and after every half-step of the best
    /// restart (ALS), or after every gradient step (GD).
    loss_trace: Vec<f64>,
    converged: bool,
    best_restart: usize,
    config: FitConfig,
}

impl JointFit {
    pub fn w_hat(&self) -> &[Array2<f64>] {
        &self.w_hat
    }

    pub fn b_hat(&self) -> &Array2<f64> {
        &self.b_hat
    }

    pub fn a_hat(&self) -> &[Array2<f64>] {
        &self.a_hat
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn best_restart(&self) -> usize {
        self.best_restart
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn k_fit(&self) -> usize {
        self.w_hat.len()
    }
}

/// Sufficient statistics of one system's regression pairs.
struct SuffStats {
    /// `S_m = sum_t x(t) x(t)'`
    gram: Array2<f64>,
    /// `C_m = sum_t x(t+1) x(t)'`
    cross: Array2<f64>,
    /// `sum_t ||x(t+1)||^2`
    response_sq: f64,
}

fn suff_stats(bundle: &TrajectoryBundle) -> Vec<SuffStats> {
    bundle
        .trajectories()
        .iter()
        .map(|tr| {
            let x = tr.regressors();
            let y = tr.responses();
            SuffStats {
                gram: x.t().dot(&x),
                cross: y.t().dot(&x),
                response_sq: y.iter().map(|v| v * v).sum(),
            }
        })
        .collect()
}

fn loss_from_stats(stats: &[SuffStats], a: &[Array2<f64>], t_len: usize) -> f64 {
    let m = stats.len() as f64;
    let mut total = 0.0;
    for (st, a_m) in stats.iter().zip(a) {
        let as_ = a_m.dot(&st.gram);
        let quad: f64 = as_.iter().zip(a_m.iter()).map(|(p, q)| p * q).sum();
        let cross: f64 = a_m.iter().zip(st.cross.iter()).map(|(p, q)| p * q).sum();
        total += st.response_sq - 2.0 * cross + quad;
    }
    total / (m * t_len as f64)
}

fn residual_loss(bundle: &TrajectoryBundle, a: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    for (tr, a_m) in bundle.trajectories().iter().zip(a) {
        let x = tr.regressors();
        let y = tr.responses();
        let diff = &y - &x.dot(&a_m.t());
        total += diff.iter().map(|v| v * v).sum::<f64>();
    }
    total / (bundle.num_systems() as f64 * bundle.num_steps() as f64)
}

/// Loss evaluator for the optimizer loop. The expanded quadratic form
/// `y2 - 2<A,C> + <AS, A>` is cheap but cancels catastrophically once the
/// loss is many orders below the data energy, so near zero it switches to
/// the direct residual form.
struct LossEval<'a> {
    stats: &'a [SuffStats],
    bundle: &'a TrajectoryBundle,
    t_len: usize,
    cancellation_floor: f64,
}

impl<'a> LossEval<'a> {
    fn new(stats: &'a [SuffStats], bundle: &'a TrajectoryBundle) -> Self {
        let t_len = bundle.num_steps();
        let energy: f64 = stats.iter().map(|st| st.response_sq).sum::<f64>()
            / (stats.len() as f64 * t_len as f64);
        Self { stats, bundle, t_len, cancellation_floor: 1e-9 * energy }
    }

    fn loss(&self, a: &[Array2<f64>]) -> f64 {
        let quad = loss_from_stats(self.stats, a, self.t_len);
        if quad < self.cancellation_floor {
            residual_loss(self.bundle, a)
        } else {
            quad
        }
    }
}

/// Averaged squared one-step prediction loss of the factorized model
/// `(W, B)` on a bundle. This is the definitional residual form.
pub fn evaluate_loss(bundle: &TrajectoryBundle, w: &[Array2<f64>], b: &Array2<f64>) -> Result<f64> {
    let d = bundle.d();
    if w.is_empty() {
        return Err(Error::InvalidArgument("basis list is empty".into()));
    }
    for (i, wi) in w.iter().enumerate() {
        if wi.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "W[{i}] is {}x{}, expected {d}x{d}",
                wi.nrows(),
                wi.ncols()
            )));
        }
    }
    if b.nrows() != w.len() || b.ncols() != bundle.num_systems() {
        return Err(Error::DimensionMismatch(format!(
            "B is {}x{}, expected {}x{}",
            b.nrows(),
            b.ncols(),
            w.len(),
            bundle.num_systems()
        )));
    }
    let t_len = bundle.num_steps();
    let mut total = 0.0;
    for (m, tr) in bundle.trajectories().iter().enumerate() {
        let a_m = compose_transition(w, b.column(m));
        let x = tr.regressors();
        let y = tr.responses();
        let pred = x.dot(&a_m.t());
        let diff = &y - &pred;
        total += diff.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / (bundle.num_systems() as f64 * t_len as f64))
}

/// Per-system least squares: `A_hat (S + eps I) = C`.
pub fn ols_fit(bundle: &TrajectoryBundle, ridge: f64) -> Result<OlsFit> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = bundle.d();
    let stats = suff_stats(bundle);
    let mut a_hat = Vec::with_capacity(stats.len());
    let mut per_system_residual = Vec::with_capacity(stats.len());
    for (m, st) in stats.iter().enumerate() {
        let mut g = st.gram.clone();
        for i in 0..d {
            g[(i, i)] += ridge;
        }
        let x = linalg::solve_spd(&g, &st.cross.t().to_owned()).map_err(|_| Error::RankDeficient {
            context: format!("OLS Gram matrix of system {m} (T too short or states degenerate)"),
        })?;
        let a_m = x.t().to_owned();
        let as_ = a_m.dot(&st.gram);
        let quad: f64 = as_.iter().zip(a_m.iter()).map(|(p, q)| p * q).sum();
        let cross: f64 = a_m.iter().zip(st.cross.iter()).map(|(p, q)| p * q).sum();
        per_system_residual.push((st.response_sq - 2.0 * cross + quad).max(0.0));
        a_hat.push(a_m);
    }
    Ok(OlsFit { a_hat, ridge_used: ridge, per_system_residual })
}

/// Solve `(G + eps I) x = rhs` with a proximal shift `eps * center`, falling
/// back to a minimum-norm solve when the system is singular at `eps = 0`.
fn solve_regularized(
    g: &Array2<f64>,
    rhs: &Array2<f64>,
    eps: f64,
    center: Option<&Array2<f64>>,
    context: &str,
) -> Result<Array2<f64>> {
    let dim = g.nrows();
    let mut lhs = g.clone();
    let mut b = rhs.clone();
    if eps > 0.0 {
        for i in 0..dim {
            lhs[(i, i)] += eps;
        }
        if let Some(c) = center {
            b.scaled_add(eps, c);
        }
    }
    match linalg::solve_spd(&lhs, &b) {
        Ok(x) => Ok(x),
        Err(_) => linalg::solve_psd_min_norm(&lhs, &b).map_err(|_| Error::RankDeficient {
            context: context.to_string(),
        }),
    }
}

/// Coefficient half-step: exact proximal ridge solve for one system's beta.
fn solve_beta(
    w: &[Array2<f64>],
    st: &SuffStats,
    ridge: &RidgePolicy,
    center: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let k = w.len();
    // F[i,j] = <W_i, W_j S>, r[i] = <W_i, C>
    let ws: Vec<Array2<f64>> = w.iter().map(|wi| wi.dot(&st.gram)).collect();
    let mut f = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let v: f64 = w[i].iter().zip(ws[j].iter()).map(|(p, q)| p * q).sum();
            f[(i, j)] = v;
            f[(j, i)] = v;
        }
    }
    let mut r = Array2::zeros((k, 1));
    for i in 0..k {
        r[(i, 0)] = w[i].iter().zip(st.cross.iter()).map(|(p, q)| p * q).sum();
    }
    let eps = ridge.epsilon(f.diag().sum(), k);
    let center_col = center.to_owned().insert_axis(ndarray::Axis(1));
    let sol = solve_regularized(&f, &r, eps, Some(&center_col), "coefficient step")?;
    Ok(sol.column(0).to_owned())
}

/// Basis half-step: exact proximal ridge solve for all `W_i` at once.
///
/// The stacked normal matrix has the block form `H[(i),(j)] = sum_m
/// B[i,m] B[j,m] S_m` of size `dk x dk`; the `d^2 k`-dimensional problem
/// factors into `d` independent solves sharing it.
fn solve_basis(
    b: &Array2<f64>,
    stats: &[SuffStats],
    ridge: &RidgePolicy,
    w_old: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    let k = b.nrows();
    let d = stats[0].gram.nrows();
    let mut h = Array2::zeros((d * k, d * k));
    let mut rhs = Array2::zeros((d * k, d));
    for (m, st) in stats.iter().enumerate() {
        for i in 0..k {
            let bi = b[(i, m)];
            for j in i..k {
                let w = bi * b[(j, m)];
                for r in 0..d {
                    for c in 0..d {
                        h[(i * d + r, j * d + c)] += w * st.gram[(r, c)];
                    }
                }
            }
            // rhs block i accumulates B[i,m] * C_m' (transposed cross term)
            for r in 0..d {
                for c in 0..d {
                    rhs[(i * d + r, c)] += bi * st.cross[(c, r)];
                }
            }
        }
    }
    // mirror the upper block triangle
    for i in 0..k {
        for j in (i + 1)..k {
            for r in 0..d {
                for c in 0..d {
                    h[(j * d + r, i * d + c)] = h[(i * d + c, j * d + r)];
                }
            }
        }
    }
    let mut center = Array2::zeros((d * k, d));
    for (i, wi) in w_old.iter().enumerate() {
        // center block i = W_i' (matching the transposed unknown layout)
        center.slice_mut(ndarray::s![i * d..(i + 1) * d, ..]).assign(&wi.t());
    }
    let eps = ridge.epsilon(h.diag().sum(), d * k);
    let sol = solve_regularized(&h, &rhs, eps, Some(&center), "basis step")?;
    Ok((0..k)
        .map(|i| sol.slice(ndarray::s![i * d..(i + 1) * d, ..]).t().to_owned())
        .collect())
}

struct RestartOutcome {
    w: Vec<Array2<f64>>,
    b: Array2<f64>,
    trace: Vec<f64>,
    converged: bool,
}

fn run_als_restart(
    bundle: &TrajectoryBundle,
    stats: &[SuffStats],
    k_fit: usize,
    config: &FitConfig,
    restart: usize,
) -> Result<RestartOutcome> {
    let eval = LossEval::new(stats, bundle);
    let d = stats[0].gram.nrows();
    let num_systems = stats.len();
    let mut rng = stream::stream(config.init_seed, "fit/init/w", restart as u64);
    let scale = 1.0 / (d as f64).sqrt();
    let mut w: Vec<Array2<f64>> = (0..k_fit)
        .map(|_| {
            let mut m = linalg::gaussian_matrix(d, d, &mut rng);
            m.map_inplace(|v| *v *= scale);
            m
        })
        .collect();
    // The first coefficient half-step overwrites B entirely, so it starts at
    // zero; that keeps the fit exactly equivariant under system permutations.
    let mut b = Array2::zeros((k_fit, num_systems));

    let compose_all = |w: &[Array2<f64>], b: &Array2<f64>| -> Vec<Array2<f64>> {
        (0..num_systems).map(|m| compose_transition(w, b.column(m))).collect()
    };
    let mut trace = vec![eval.loss(&compose_all(&w, &b))];
    let mut converged = false;
    for iter in 0..config.max_iters {
        let loss_before = *trace.last().unwrap();
        for m in 0..num_systems {
            let beta = solve_beta(&w, &stats[m], &config.ridge, b.column(m))?;
            b.column_mut(m).assign(&beta);
        }
        trace.push(eval.loss(&compose_all(&w, &b)));
        w = solve_basis(&b, stats, &config.ridge, &w)?;
        let loss_after = eval.loss(&compose_all(&w, &b));
        trace.push(loss_after);
        if !loss_after.is_finite() {
            return Err(Error::Divergence { iter });
        }
        if loss_before - loss_after < config.tol * loss_before.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(RestartOutcome { w, b, trace, converged })
}

fn run_gd_restart(
    bundle: &TrajectoryBundle,
    stats: &[SuffStats],
    k_fit: usize,
    config: &FitConfig,
    restart: usize,
) -> Result<RestartOutcome> {
    let eval = LossEval::new(stats, bundle);
    let t_len = bundle.num_steps();
    let d = stats[0].gram.nrows();
    let num_systems = stats.len();
    let mut rng_w = stream::stream(config.init_seed, "fit/init/w", restart as u64);
    let scale = 1.0 / (d as f64).sqrt();
    let mut w: Vec<Array2<f64>> = (0..k_fit)
        .map(|_| {
            let mut m = linalg::gaussian_matrix(d, d, &mut rng_w);
            m.map_inplace(|v| *v *= scale);
            m
        })
        .collect();
    let mut rng_b = stream::stream(config.init_seed, "fit/init/b", restart as u64);
    let mut b = linalg::gaussian_matrix(k_fit, num_systems, &mut rng_b);

    let norm = 2.0 / (num_systems as f64 * t_len as f64);
    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let mut converged = false;
    let mut loss_before = f64::INFINITY;
    for iter in 0..=config.max_iters {
        let a: Vec<Array2<f64>> =
            (0..num_systems).map(|m| compose_transition(&w, b.column(m))).collect();
        let loss = eval.loss(&a);
        if !loss.is_finite() {
            return Err(Error::Divergence { iter });
        }
        trace.push(loss);
        let decrease = loss_before - loss;
        if iter > 0 && decrease >= 0.0 && decrease < config.tol * loss_before.max(f64::MIN_POSITIVE)
        {
            converged = true;
            break;
        }
        loss_before = loss;
        if iter == config.max_iters {
            break;
        }
        // G_m = norm * (A_m S_m - C_m)
        let grads: Vec<Array2<f64>> = (0..num_systems)
            .map(|m| {
                let mut g = a[m].dot(&stats[m].gram);
                g -= &stats[m].cross;
                g *= norm;
                g
            })
            .collect();
        let mut w_grad: Vec<Array2<f64>> = vec![Array2::zeros((d, d)); k_fit];
        let mut b_grad = Array2::zeros((k_fit, num_systems));
        for m in 0..num_systems {
            for i in 0..k_fit {
                w_grad[i].scaled_add(b[(i, m)], &grads[m]);
                b_grad[(i, m)] = w[i].iter().zip(grads[m].iter()).map(|(p, q)| p * q).sum();
            }
        }
        for i in 0..k_fit {
            w[i].scaled_add(-config.gd_step, &w_grad[i]);
        }
        b.scaled_add(-config.gd_step, &b_grad);
    }
    Ok(RestartOutcome { w, b, trace, converged })
}

/// Fit the joint shared-basis model with `k_fit` bases.
pub fn joint_fit(bundle: &TrajectoryBundle, k_fit: usize, config: &FitConfig) -> Result<JointFit> {
    config.validate()?;
    let d = bundle.d();
    if k_fit == 0 || k_fit > d * d {
        return Err(Error::InvalidArgument(format!("k_fit must be in [1, d^2], got {k_fit}")));
    }
    let stats = suff_stats(bundle);
    let mut best: Option<(usize, RestartOutcome)> = None;
    for restart in 0..config.restarts {
        let outcome = match config.optimizer {
            Optimizer::Als => run_als_restart(bundle, &stats, k_fit, config, restart)?,
            Optimizer::Gd => run_gd_restart(bundle, &stats, k_fit, config, restart)?,
        };
        let is_better = match &best {
            Some((_, cur)) => {
                outcome.trace.last().unwrap() < cur.trace.last().unwrap()
            }
            None => true,
        };
        if is_better {
            best = Some((restart, outcome));
        }
    }
    let (best_restart, outcome) = best.expect("restarts >= 1");
    let a_hat = (0..bundle.num_systems())
        .map(|m| compose_transition(&outcome.w, outcome.b.column(m)))
        .collect();
    Ok(JointFit {
        w_hat: outcome.w,
        b_hat: outcome.b,
        a_hat,
        loss_trace: outcome.trace,
        converged: outcome.converged,
        best_restart,
        config: *config,
    })
}

// --- model selection ---------------------------------------------------------

/// How validation data is carved out of a bundle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSplit {
    /// Hold out the trailing fraction of time steps of every system.
    TrailingSteps(f64),
    /// Hold out a trailing fraction of the systems; the shared basis is fit
    /// on the remaining ones and held-out coefficients are refit on the
    /// leading steps of each held-out trajectory.
    Systems(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectKOptions {
    pub split: ValidationSplit,
    pub elbow_slack: f64,
}

impl Default for SelectKOptions {
    fn default() -> Self {
        Self { split: ValidationSplit::TrailingSteps(0.2), elbow_slack: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub k: usize,
    /// Final training loss at this basis count.
    pub fit_error: f64,
    /// Mean squared one-step prediction error on the held-out portion.
    pub validation_error: f64,
}

fn prediction_error(
    bundle: &TrajectoryBundle,
    a_hat: &[Array2<f64>],
    systems: &[usize],
    t_range: std::ops::Range<usize>,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (&m, a_m) in systems.iter().zip(a_hat) {
        let tr = bundle.trajectory(m);
        let x = tr.regressors();
        let y = tr.responses();
        for t in t_range.clone() {
            let pred = a_m.dot(&x.row(t));
            let diff = &y.row(t).to_owned() - &pred;
            total += diff.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
    }
    total / count as f64
}

/// Fit every `k` in the grid, score one-step-ahead prediction on the
/// held-out portion, and pick the smallest `k` whose validation error is
/// within `1 + elbow_slack` of the grid minimum.
pub fn select_k(
    bundle: &TrajectoryBundle,
    k_grid: &[usize],
    options: &SelectKOptions,
    config: &FitConfig,
) -> Result<(usize, Vec<SelectionPoint>)> {
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("k grid is empty".into()));
    }
    if k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("k grid must be strictly ascending".into()));
    }
    if !(options.elbow_slack >= 0.0) {
        return Err(Error::InvalidArgument("elbow_slack must be >= 0".into()));
    }
    let t_len = bundle.num_steps();
    let num_systems = bundle.num_systems();
    let mut curve = Vec::with_capacity(k_grid.len());
    match options.split {
        ValidationSplit::TrailingSteps(frac) => {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::InvalidArgument(format!("held-out fraction {frac}")));
            }
            let t_val = ((frac * t_len as f64).round() as usize).clamp(1, t_len - 1);
            let t_train = t_len - t_val;
            let train = bundle.truncated(t_train)?;
            let all_systems: Vec<usize> = (0..num_systems).collect();
            for &k in k_grid {
                let fit = joint_fit(&train, k, config)?;
                let val = prediction_error(bundle, fit.a_hat(), &all_systems, t_train..t_len);
                curve.push(SelectionPoint { k, fit_error: fit.final_loss(), validation_error: val });
            }
        }
        ValidationSplit::Systems(frac) => {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::InvalidArgument(format!("held-out fraction {frac}")));
            }
            let m_val = ((frac * num_systems as f64).round() as usize).clamp(1, num_systems - 1);
            let m_train = num_systems - m_val;
            let train = subset_bundle(bundle, 0..m_train)?;
            // held-out coefficients are refit on the leading steps only
            let t_val = ((0.2 * t_len as f64).round() as usize).clamp(1, t_len - 1);
            let t_fit = t_len - t_val;
            let held_out: Vec<usize> = (m_train..num_systems).collect();
            for &k in k_grid {
                let fit = joint_fit(&train, k, config)?;
                let mut a_val = Vec::with_capacity(m_val);
                for &m in &held_out {
                    let tr = bundle.trajectory(m);
                    let x = tr.regressors().slice(ndarray::s![..t_fit, ..]).to_owned();
                    let y = tr.responses().slice(ndarray::s![..t_fit, ..]).to_owned();
                    let st = SuffStats {
                        gram: x.t().dot(&x),
                        cross: y.t().dot(&x),
                        response_sq: y.iter().map(|v| v * v).sum(),
                    };
                    let beta =
                        solve_beta(fit.w_hat(), &st, &config.ridge, Array1::zeros(k).view())?;
                    a_val.push(compose_transition(fit.w_hat(), beta.view()));
                }
                let val = prediction_error(bundle, &a_val, &held_out, t_fit..t_len);
                curve.push(SelectionPoint { k, fit_error: fit.final_loss(), validation_error: val });
            }
        }
    }
    let min_val = curve.iter().map(|p| p.validation_error).fold(f64::INFINITY, f64::min);
    let k_chosen = curve
        .iter()
        .find(|p| p.validation_error <= (1.0 + options.elbow_slack) * min_val)
        .map(|p| p.k)
        .expect("grid minimum is attained on the grid");
    Ok((k_chosen, curve))
}

fn subset_bundle(bundle: &TrajectoryBundle, range: std::ops::Range<usize>) -> Result<TrajectoryBundle> {
    let trajectories: Vec<_> = range
        .clone()
        .enumerate()
        .map(|(new_idx, m)| {
            let tr = bundle.trajectory(m);
            crate::dynamics::Trajectory::new(tr.states().clone(), new_idx).map(|mut t| {
                if let Some(r) = tr.response_array() {
                    t = crate::dynamics::Trajectory::with_responses(
                        tr.states().clone(),
                        r.clone(),
                        new_idx,
                    );
                }
                t
            })
        })
        .collect::<Result<_>>()?;
    TrajectoryBundle::new(trajectories, bundle.noise().clone(), bundle.mode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_bundle, NoiseModel, X0Policy};
    use crate::ensemble::{
        compose_systems, generate_shared_basis, rescale_to_radius, sample_coefficients,
        uniform_radius_targets, CoefficientSet, SharedBasis, SystemEnsemble,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn stable_ensemble(k: usize, d: usize, m: usize, seed: u64) -> SystemEnsemble {
        let basis = generate_shared_basis(k, d, seed).unwrap();
        let coeffs = sample_coefficients(k, m, seed + 1).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        rescale_to_radius(ens, &uniform_radius_targets(0.7, 0.9, m, seed + 2).unwrap(), 200)
            .unwrap()
    }

    fn noisy_bundle(
        k: usize,
        d: usize,
        m: usize,
        t: usize,
        seed: u64,
    ) -> (SystemEnsemble, TrajectoryBundle) {
        let ens = stable_ensemble(k, d, m, seed);
        let noise = NoiseModel::isotropic(d, 1.0).unwrap();
        let bundle = simulate_bundle(&ens, t, &noise, &X0Policy::Zero, seed + 3).unwrap();
        (ens, bundle)
    }

    #[test]
    fn loss_is_zero_on_zero_states() {
        let states = ndarray::Array2::zeros((6, 2));
        let tr = crate::dynamics::Trajectory::new(states, 0).unwrap();
        let bundle =
            TrajectoryBundle::new(vec![tr], NoiseModel::isotropic(2, 1.0).unwrap(), crate::dynamics::BundleMode::Var)
                .unwrap();
        let w = vec![ndarray::Array2::eye(2)];
        let b = array![[1.0]];
        assert_eq!(evaluate_loss(&bundle, &w, &b).unwrap(), 0.0);
    }

    #[test]
    fn loss_vanishes_at_ground_truth_on_noiseless_data() {
        let ens = stable_ensemble(2, 4, 3, 50);
        let noise = NoiseModel::isotropic(4, 0.0).unwrap();
        let x0s = (0..3).map(|i| ndarray::Array1::ones(4) * (i as f64 + 1.0)).collect();
        let bundle = simulate_bundle(&ens, 10, &noise, &X0Policy::Given(x0s), 51).unwrap();
        let loss = evaluate_loss(
            &bundle,
            ens.basis().matrices(),
            ens.coefficients().matrix(),
        )
        .unwrap();
        assert!(loss <= 1e-18, "loss {loss}");
    }

    #[test]
    fn loss_at_truth_equals_mean_noise_energy() {
        let (ens, bundle) = noisy_bundle(3, 6, 4, 40, 60);
        let loss = evaluate_loss(
            &bundle,
            ens.basis().matrices(),
            ens.coefficients().matrix(),
        )
        .unwrap();
        let draws = bundle.noise_draws().unwrap();
        let noise_energy: f64 = draws.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum();
        let expected = noise_energy / (4.0 * 40.0);
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12 * expected);
    }

    #[test]
    fn ols_recovers_noiseless_diagonal_system() {
        // oracle: direct 2x2 solve on the Krylov pairs
        let a_true = array![[0.9, 0.0], [0.0, 0.5]];
        let basis = SharedBasis::new(vec![a_true.clone()]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let noise = NoiseModel::isotropic(2, 0.0).unwrap();
        let x0s = vec![array![1.0, 1.0]];
        let bundle = simulate_bundle(&ens, 5, &noise, &X0Policy::Given(x0s), 0).unwrap();
        let fit = ols_fit(&bundle, 0.0).unwrap();
        let err = linalg::frobenius_sq((&fit.a_hat()[0] - &a_true).view()).sqrt();
        assert!(err <= 1e-10, "||A_hat - A|| = {err}");

        // independent oracle: accumulate the 2x2 normal equations by hand
        let tr = bundle.trajectory(0);
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        let mut c = [[0.0; 2]; 2];
        for t in 0..5 {
            let x = tr.states().row(t);
            let y = tr.states().row(t + 1);
            s00 += x[0] * x[0];
            s01 += x[0] * x[1];
            s11 += x[1] * x[1];
            for r in 0..2 {
                c[r][0] += y[r] * x[0];
                c[r][1] += y[r] * x[1];
            }
        }
        let det = s00 * s11 - s01 * s01;
        let inv = [[s11 / det, -s01 / det], [-s01 / det, s00 / det]];
        for r in 0..2 {
            for j in 0..2 {
                let manual = c[r][0] * inv[0][j] + c[r][1] * inv[1][j];
                assert_abs_diff_eq!(fit.a_hat()[0][(r, j)], manual, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ols_shrinks_on_pure_noise() {
        let basis = SharedBasis::new(vec![ndarray::Array2::zeros((2, 2))]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let noise = NoiseModel::isotropic(2, 1.0).unwrap();
        let bundle = simulate_bundle(&ens, 10_000, &noise, &X0Policy::Zero, 1).unwrap();
        let fit = ols_fit(&bundle, 0.0).unwrap();
        let norm = linalg::frobenius_sq(fit.a_hat()[0].view()).sqrt();
        assert!(norm <= 0.1, "||A_hat|| = {norm}");
    }

    #[test]
    fn ols_reports_rank_deficiency_at_t_one() {
        let a = array![[0.5, 0.0], [0.0, 0.5]];
        let basis = SharedBasis::new(vec![a]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let noise = NoiseModel::isotropic(2, 1.0).unwrap();
        let bundle = simulate_bundle(&ens, 1, &noise, &X0Policy::Zero, 2).unwrap();
        let err = ols_fit(&bundle, 0.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
    }

    #[test]
    fn joint_fit_recovers_identical_noiseless_systems() {
        // M identical systems, k_fit = 1, exact rank-1 case
        let a_true = array![[0.6, 0.2], [0.1, 0.4]];
        let basis = SharedBasis::new(vec![a_true.clone()]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0, 1.0, 1.0]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let noise = NoiseModel::isotropic(2, 0.0).unwrap();
        let x0s = vec![array![1.0, 1.0], array![1.0, -1.0], array![2.0, 0.5]];
        let bundle = simulate_bundle(&ens, 8, &noise, &X0Policy::Given(x0s), 3).unwrap();
        let config =
            FitConfig { ridge: RidgePolicy::Fixed(0.0), max_iters: 5000, ..FitConfig::default() };
        let fit = joint_fit(&bundle, 1, &config).unwrap();
        for m in 0..3 {
            let err = linalg::frobenius_sq((&fit.a_hat()[m] - &a_true).view()).sqrt();
            assert!(err <= 1e-8, "system {m}: error {err}");
        }
    }

    #[test]
    fn als_trace_is_monotone_on_noisy_data() {
        for seed in 0..5 {
            let (_ens, bundle) = noisy_bundle(3, 8, 10, 60, 100 + seed * 10);
            let fit = joint_fit(&bundle, 3, &FitConfig::default()).unwrap();
            let trace = fit.loss_trace();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "trace increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn final_trace_entry_matches_evaluate_loss() {
        let (_ens, bundle) = noisy_bundle(2, 5, 6, 50, 200);
        let fit = joint_fit(&bundle, 2, &FitConfig::default()).unwrap();
        let direct = evaluate_loss(&bundle, fit.w_hat(), fit.b_hat()).unwrap();
        assert_abs_diff_eq!(fit.final_loss(), direct, epsilon = 1e-9 * direct.max(1.0));
    }

    #[test]
    fn saturated_joint_fit_matches_ols_loss() {
        // k_fit = d^2 and M = 1: the factorized model spans every matrix
        let (_ens, bundle) = noisy_bundle(2, 4, 1, 50, 300);
        let config = FitConfig { ridge: RidgePolicy::Fixed(0.0), ..FitConfig::default() };
        let fit = joint_fit(&bundle, 16, &config).unwrap();
        let ols = ols_fit(&bundle, 0.0).unwrap();
        let ols_loss = ols.per_system_residual()[0] / 50.0;
        assert_abs_diff_eq!(fit.final_loss(), ols_loss, epsilon = 1e-8 * ols_loss.max(1.0));
    }

    #[test]
    fn joint_beats_ols_at_paper_shape() {
        let (ens, bundle) = noisy_bundle(3, 10, 50, 100, 400);
        let joint = joint_fit(&bundle, 3, &FitConfig::default()).unwrap();
        let ols = ols_fit(&bundle, 0.0).unwrap();
        let joint_err = crate::diagnostics::estimation_error(joint.a_hat(), &ens, "joint").unwrap();
        let ols_err = crate::diagnostics::estimation_error(ols.a_hat(), &ens, "ols").unwrap();
        assert!(
            joint_err.mean() < ols_err.mean(),
            "joint {} !< ols {}",
            joint_err.mean(),
            ols_err.mean()
        );
    }

    #[test]
    fn gauge_transform_leaves_estimates_unchanged() {
        let (_ens, bundle) = noisy_bundle(3, 6, 8, 40, 500);
        let fit = joint_fit(&bundle, 3, &FitConfig::default()).unwrap();
        let mut rng = stream::stream(55, "test/gauge", 0);
        let g = linalg::gaussian_matrix(3, 3, &mut rng) + ndarray::Array2::<f64>::eye(3) * 2.0;
        let g_inv = linalg::inverse(&g).unwrap();
        let w_new: Vec<ndarray::Array2<f64>> = (0..3)
            .map(|j| {
                let mut acc = ndarray::Array2::<f64>::zeros((6, 6));
                for i in 0..3 {
                    acc.scaled_add(g_inv[(i, j)], &fit.w_hat()[i]);
                }
                acc
            })
            .collect();
        let b_new = g.dot(fit.b_hat());
        for m in 0..8 {
            let a_new = compose_transition(&w_new, b_new.column(m));
            let drift = (&a_new - &fit.a_hat()[m]).mapv(f64::abs).sum();
            assert!(drift <= 1e-10, "gauge drift {drift} at system {m}");
        }
    }

    #[test]
    fn permuting_systems_permutes_estimates() {
        let (_ens, bundle) = noisy_bundle(2, 5, 4, 30, 600);
        let fit = joint_fit(&bundle, 2, &FitConfig::default()).unwrap();
        // reverse the system order
        let perm: Vec<usize> = (0..4).rev().collect();
        let permuted_trs: Vec<_> = perm
            .iter()
            .enumerate()
            .map(|(new_idx, &old)| {
                crate::dynamics::Trajectory::new(
                    bundle.trajectory(old).states().clone(),
                    new_idx,
                )
                .unwrap()
            })
            .collect();
        let permuted = TrajectoryBundle::new(
            permuted_trs,
            bundle.noise().clone(),
            crate::dynamics::BundleMode::Var,
        )
        .unwrap();
        let fit_p = joint_fit(&permuted, 2, &FitConfig::default()).unwrap();
        for (new_idx, &old) in perm.iter().enumerate() {
            let drift = (&fit_p.a_hat()[new_idx] - &fit.a_hat()[old]).mapv(f64::abs).sum();
            assert!(drift <= 1e-9, "permutation drift {drift}");
        }
        assert_abs_diff_eq!(fit.final_loss(), fit_p.final_loss(), epsilon = 1e-12);
    }

    #[test]
    fn larger_models_fit_no_worse() {
        let (_ens, bundle) = noisy_bundle(3, 6, 12, 50, 700);
        let config = FitConfig { restarts: 5, ..FitConfig::default() };
        let mut prev = f64::INFINITY;
        for k in [1usize, 2, 4, 6] {
            let fit = joint_fit(&bundle, k, &config).unwrap();
            assert!(
                fit.final_loss() <= prev + 1e-6,
                "k={k}: loss {} vs previous {prev}",
                fit.final_loss()
            );
            prev = fit.final_loss();
        }
    }

    #[test]
    fn gd_optimizer_converges_on_small_problem() {
        let (ens, bundle) = noisy_bundle(2, 4, 6, 80, 800);
        let config = FitConfig {
            optimizer: Optimizer::Gd,
            gd_step: 2e-3,
            max_iters: 5000,
            tol: 1e-10,
            ..FitConfig::default()
        };
        let fit = joint_fit(&bundle, 2, &config).unwrap();
        let err = crate::diagnostics::estimation_error(fit.a_hat(), &ens, "gd").unwrap();
        let ols = ols_fit(&bundle, 0.0).unwrap();
        let ols_err = crate::diagnostics::estimation_error(ols.a_hat(), &ens, "ols").unwrap();
        assert!(
            err.mean() < ols_err.mean() * 1.5,
            "gd {} vs ols {}",
            err.mean(),
            ols_err.mean()
        );
        for w in fit.loss_trace().windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "gd trace increased");
        }
    }

    #[test]
    fn gd_divergence_is_reported() {
        let (_ens, bundle) = noisy_bundle(2, 4, 3, 30, 900);
        let config = FitConfig {
            optimizer: Optimizer::Gd,
            gd_step: 10.0,
            max_iters: 200,
            ..FitConfig::default()
        };
        let err = joint_fit(&bundle, 2, &config).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn select_k_picks_one_on_noiseless_rank_one_data() {
        let a_true = array![[0.7, 0.1], [0.0, 0.5]];
        let basis = SharedBasis::new(vec![a_true]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0, 0.8, 1.3, -0.9]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let noise = NoiseModel::isotropic(2, 0.0).unwrap();
        let x0s = (0..4).map(|i| array![1.0 + i as f64, 1.0 - i as f64]).collect();
        let bundle = simulate_bundle(&ens, 20, &noise, &X0Policy::Given(x0s), 5).unwrap();
        let (k, curve) =
            select_k(&bundle, &[1, 2, 3], &SelectKOptions::default(), &FitConfig::default())
                .unwrap();
        assert_eq!(k, 1);
        assert!(curve[0].validation_error <= 1e-12, "val error {}", curve[0].validation_error);
    }

    #[test]
    fn select_k_finds_truth_at_desk_scale() {
        let (_ens, bundle) = noisy_bundle(3, 8, 20, 100, 1000);
        let (k, curve) = select_k(
            &bundle,
            &[1, 2, 3, 4, 5, 6],
            &SelectKOptions::default(),
            &FitConfig::default(),
        )
        .unwrap();
        assert!(k == 3 || k == 4, "chose k = {k}, curve {curve:?}");
        // validation error is non-increasing past the truth, up to fit noise
        for w in curve[2..].windows(2) {
            assert!(
                w[1].validation_error - w[0].validation_error <= 0.05 * w[0].validation_error,
                "validation error jumped after truth: {curve:?}"
            );
        }
    }

    #[test]
    fn select_k_with_system_holdout_runs() {
        let (_ens, bundle) = noisy_bundle(2, 6, 10, 60, 1100);
        let opts = SelectKOptions { split: ValidationSplit::Systems(0.3), elbow_slack: 0.05 };
        let (k, curve) = select_k(&bundle, &[1, 2, 3, 4], &opts, &FitConfig::default()).unwrap();
        assert!(curve.len() == 4);
        assert!((1..=4).contains(&k));
    }
}
