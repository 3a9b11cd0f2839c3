//! Trajectory simulation for VAR(1) processes and the independent-regressor
//! variant.
//!
//! State recursion: `x(t+1) = A x(t) + eta(t+1)` with martingale-difference
//! Gaussian noise. Regression mode draws fresh regressors each step instead
//! of feeding states back, so the sample covariance no longer depends on `A`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::ensemble::SystemEnsemble;
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::linalg;
use crate::stream;

/// Gaussian noise with covariance `C` and sub-Gaussian proxy
/// `sigma^2 = lambda_max(C)`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    c: Array2<f64>,
    sigma_sq: f64,
    /// Symmetric square root of `C`, used for sampling. Handles singular
    /// covariances (including `C = 0`), unlike a Cholesky factor.
    factor: Array2<f64>,
}

impl NoiseModel {
    pub fn gaussian(c: Array2<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        if !linalg::is_symmetric(&c, 1e-12) {
            return Err(Error::InvalidArgument("noise covariance must be symmetric".into()));
        }
        use ndarray_linalg::{Eigh, UPLO};
        let (eigs, vecs) = c.eigh(UPLO::Lower)?;
        let mut sigma_sq = 0.0_f64;
        for &lam in eigs.iter() {
            if lam < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "noise covariance has negative eigenvalue {lam:.3e}"
                )));
            }
            sigma_sq = sigma_sq.max(lam);
        }
        // factor = V diag(sqrt(max(lam, 0))) V'
        let mut scaled = vecs.clone();
        for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
            let s = eigs[j].max(0.0).sqrt();
            col.map_inplace(|v| *v *= s);
        }
        let factor = scaled.dot(&vecs.t());
        Ok(Self { c, sigma_sq, factor })
    }

    /// Isotropic Gaussian `C = variance * I`.
    pub fn isotropic(d: usize, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::InvalidArgument(format!("variance must be >= 0, got {variance}")));
        }
        Self::gaussian(Array2::eye(d) * variance)
    }

    pub fn d(&self) -> usize {
        self.c.nrows()
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn lambda_min(&self) -> Result<f64> {
        Ok(linalg::sym_eig_extremes(&self.c)?.0.max(0.0))
    }

    fn sample(&self, rng: &mut impl rand::Rng) -> Array1<f64> {
        let z = linalg::gaussian_vector(self.d(), rng);
        self.factor.dot(&z)
    }
}

/// How initial states are chosen for a bundle.
#[derive(Debug, Clone)]
pub enum X0Policy {
    Zero,
    Given(Vec<Array1<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    Var,
    Regression,
}

/// One system's trajectory: `(T+1) x d` states, row `t` holding `x(t)`.
///
/// In regression mode the rows of `states` are the independently drawn
/// regressors and `responses` is the paired array whose row `t+1` holds the
/// response to regressor row `t` (row 0 is unused).
#[derive(Debug, Clone)]
pub struct Trajectory {
    states: Array2<f64>,
    responses: Option<Array2<f64>>,
    system_index: usize,
}

impl Trajectory {
    pub fn new(states: Array2<f64>, system_index: usize) -> Result<Self> {
        if states.nrows() < 2 {
            return Err(Error::InvalidArgument("trajectory needs at least 2 rows".into()));
        }
        if !linalg::all_finite(states.view()) {
            return Err(Error::InvalidArgument("trajectory has non-finite entries".into()));
        }
        Ok(Self { states, responses: None, system_index })
    }

    /// Trajectory with an explicit paired response array (regression mode).
    pub fn with_responses(states: Array2<f64>, responses: Array2<f64>, system_index: usize) -> Self {
        Self { states, responses: Some(responses), system_index }
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn system_index(&self) -> usize {
        self.system_index
    }

    /// Number of transition steps `T` (rows minus one).
    pub fn num_steps(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn d(&self) -> usize {
        self.states.ncols()
    }

    /// Regressor rows `0..T`.
    pub fn regressors(&self) -> ArrayView2<'_, f64> {
        self.states.slice(ndarray::s![..self.num_steps(), ..])
    }

    /// Response rows `1..=T` of the paired array (the states themselves in
    /// VAR mode).
    pub fn responses(&self) -> ArrayView2<'_, f64> {
        let src = self.responses.as_ref().unwrap_or(&self.states);
        src.slice(ndarray::s![1..=self.num_steps(), ..])
    }

    pub fn response_array(&self) -> Option<&Array2<f64>> {
        self.responses.as_ref()
    }
}

/// `M` trajectories with common `(T, d)`, plus the generating noise model.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    trajectories: Vec<Trajectory>,
    noise: NoiseModel,
    mode: BundleMode,
    /// Per-system noise draws `eta(1..=T)`, retained by the simulators so
    /// that concentration events can be checked exactly. Not persisted.
    noise_draws: Option<Vec<Array2<f64>>>,
    seed: Option<u64>,
}

impl TrajectoryBundle {
    pub fn new(trajectories: Vec<Trajectory>, noise: NoiseModel, mode: BundleMode) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("bundle needs at least one trajectory".into()));
        }
        let t = trajectories[0].num_steps();
        let d = trajectories[0].d();
        for (m, tr) in trajectories.iter().enumerate() {
            if tr.num_steps() != t || tr.d() != d {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory {m} has (T={}, d={}), expected (T={t}, d={d})",
                    tr.num_steps(),
                    tr.d()
                )));
            }
            if tr.system_index() != m {
                return Err(Error::InvalidArgument(format!(
                    "trajectory at position {m} carries system index {}",
                    tr.system_index()
                )));
            }
        }
        if noise.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "noise dimension {} does not match d={d}",
                noise.d()
            )));
        }
        Ok(Self { trajectories, noise, mode, noise_draws: None, seed: None })
    }

    pub fn num_systems(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories[0].num_steps()
    }

    pub fn d(&self) -> usize {
        self.trajectories[0].d()
    }

    pub fn mode(&self) -> BundleMode {
        self.mode
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn trajectory(&self, m: usize) -> &Trajectory {
        &self.trajectories[m]
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Stored noise draws, when the bundle came from a simulator.
    pub fn noise_draws(&self) -> Result<&[Array2<f64>]> {
        self.noise_draws.as_deref().ok_or(Error::NoiseUnavailable)
    }

    pub fn has_noise_draws(&self) -> bool {
        self.noise_draws.is_some()
    }

    /// Truncate every trajectory to its first `t_keep` transition steps.
    pub fn truncated(&self, t_keep: usize) -> Result<TrajectoryBundle> {
        if t_keep == 0 || t_keep > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {t_keep} of {} steps",
                self.num_steps()
            )));
        }
        let trajectories = self
            .trajectories
            .iter()
            .map(|tr| {
                let states = tr.states.slice(ndarray::s![..=t_keep, ..]).to_owned();
                let responses =
                    tr.responses.as_ref().map(|r| r.slice(ndarray::s![..=t_keep, ..]).to_owned());
                Trajectory { states, responses, system_index: tr.system_index }
            })
            .collect();
        let noise_draws = self.noise_draws.as_ref().map(|all| {
            all.iter().map(|n| n.slice(ndarray::s![..t_keep, ..]).to_owned()).collect()
        });
        Ok(TrajectoryBundle {
            trajectories,
            noise: self.noise.clone(),
            mode: self.mode,
            noise_draws,
            seed: self.seed,
        })
    }
}

fn check_finite_row(row: &Array1<f64>, step: usize) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow { step, system: None })
    }
}

fn simulate_var_with_rng(
    a: &Array2<f64>,
    t_len: usize,
    noise: &NoiseModel,
    x0: &Array1<f64>,
    rng: &mut impl rand::Rng,
    system_index: usize,
) -> Result<(Trajectory, Array2<f64>)> {
    let d = a.nrows();
    let mut states = Array2::zeros((t_len + 1, d));
    let mut draws = Array2::zeros((t_len, d));
    states.row_mut(0).assign(x0);
    check_finite_row(&x0.to_owned(), 0)?;
    let mut x = x0.to_owned();
    for t in 0..t_len {
        let eta = noise.sample(rng);
        let next = a.dot(&x) + &eta;
        check_finite_row(&next, t + 1)?;
        states.row_mut(t + 1).assign(&next);
        draws.row_mut(t).assign(&eta);
        x = next;
    }
    Ok((Trajectory { states, responses: None, system_index }, draws))
}

/// Simulate a single VAR(1) trajectory of `T` steps.
pub fn simulate(
    a: &Array2<f64>,
    t_len: usize,
    noise: &NoiseModel,
    x0: &Array1<f64>,
    seed: u64,
) -> Result<Trajectory> {
    validate_sim_args(a, t_len, noise, Some(x0))?;
    let mut rng = stream::stream(seed, "dynamics", 0);
    let (trajectory, _draws) = simulate_var_with_rng(a, t_len, noise, x0, &mut rng, 0)?;
    Ok(trajectory)
}

fn validate_sim_args(
    a: &Array2<f64>,
    t_len: usize,
    noise: &NoiseModel,
    x0: Option<&Array1<f64>>,
) -> Result<()> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!("A is {}x{}", a.nrows(), a.ncols())));
    }
    if !linalg::all_finite(a.view()) {
        return Err(Error::InvalidArgument("A has non-finite entries".into()));
    }
    if noise.d() != a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "noise dimension {} does not match d={}",
            noise.d(),
            a.nrows()
        )));
    }
    if let Some(x0) = x0 {
        if x0.len() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has length {}, expected {}",
                x0.len(),
                a.nrows()
            )));
        }
    }
    Ok(())
}

fn resolve_x0(policy: &X0Policy, d: usize, num_systems: usize) -> Result<Vec<Array1<f64>>> {
    match policy {
        X0Policy::Zero => Ok(vec![Array1::zeros(d); num_systems]),
        X0Policy::Given(list) => {
            if list.len() != num_systems {
                return Err(Error::DimensionMismatch(format!(
                    "{} initial states for {} systems",
                    list.len(),
                    num_systems
                )));
            }
            Ok(list.clone())
        }
    }
}

/// Simulate all systems of an ensemble; system `m` draws from the sub-stream
/// `(seed, "dynamics", m)`, so bundles grow with `M` without disturbing
/// earlier systems.
pub fn simulate_bundle(
    ensemble: &SystemEnsemble,
    t_len: usize,
    noise: &NoiseModel,
    x0_policy: &X0Policy,
    seed: u64,
) -> Result<TrajectoryBundle> {
    let num_systems = ensemble.num_systems();
    let x0s = resolve_x0(x0_policy, ensemble.d(), num_systems)?;
    let mut trajectories = Vec::with_capacity(num_systems);
    let mut draws = Vec::with_capacity(num_systems);
    for m in 0..num_systems {
        validate_sim_args(ensemble.transition(m), t_len, noise, Some(&x0s[m]))?;
        let mut rng = stream::stream(seed, "dynamics", m as u64);
        let (tr, dr) =
            simulate_var_with_rng(ensemble.transition(m), t_len, noise, &x0s[m], &mut rng, m)
                .map_err(|e| e.tag_system(m))?;
        trajectories.push(tr);
        draws.push(dr);
    }
    let mut bundle = TrajectoryBundle::new(trajectories, noise.clone(), BundleMode::Var)?;
    bundle.noise_draws = Some(draws);
    bundle.seed = Some(seed);
    Ok(bundle)
}

/// Independent-regressor variant: regressors `x(t) ~ N(0, regressor_cov)`
/// are drawn fresh each step and responses `y(t) = A x(t) + eta(t)` are
/// stored in the paired array at row `t+1`.
pub fn simulate_regression_bundle(
    ensemble: &SystemEnsemble,
    t_len: usize,
    noise: &NoiseModel,
    regressor_cov: &Array2<f64>,
    seed: u64,
) -> Result<TrajectoryBundle> {
    let regressor_model = NoiseModel::gaussian(regressor_cov.clone())?;
    if regressor_model.d() != ensemble.d() {
        return Err(Error::DimensionMismatch(format!(
            "regressor covariance dimension {} does not match d={}",
            regressor_model.d(),
            ensemble.d()
        )));
    }
    let num_systems = ensemble.num_systems();
    let mut trajectories = Vec::with_capacity(num_systems);
    let mut draws = Vec::with_capacity(num_systems);
    for m in 0..num_systems {
        let a = ensemble.transition(m);
        validate_sim_args(a, t_len, noise, None)?;
        let mut rng = stream::stream(seed, "regression", m as u64);
        let d = ensemble.d();
        let mut states = Array2::zeros((t_len + 1, d));
        let mut responses = Array2::zeros((t_len + 1, d));
        let mut dr = Array2::zeros((t_len, d));
        for t in 0..=t_len {
            let x = regressor_model.sample(&mut rng);
            check_finite_row(&x, t).map_err(|e| e.tag_system(m))?;
            states.row_mut(t).assign(&x);
        }
        for t in 0..t_len {
            let eta = noise.sample(&mut rng);
            let y = a.dot(&states.row(t)) + &eta;
            check_finite_row(&y, t + 1).map_err(|e| e.tag_system(m))?;
            responses.row_mut(t + 1).assign(&y);
            dr.row_mut(t).assign(&eta);
        }
        trajectories.push(Trajectory { states, responses: Some(responses), system_index: m });
        draws.push(dr);
    }
    let mut bundle = TrajectoryBundle::new(trajectories, noise.clone(), BundleMode::Regression)?;
    bundle.noise_draws = Some(draws);
    bundle.seed = Some(seed);
    Ok(bundle)
}

// --- persistence ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BundleSidecar {
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    #[serde(rename = "M")]
    num_systems: usize,
    mode: BundleMode,
    noise: NoiseSidecar,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseSidecar {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
    sigma_sq: f64,
}

fn is_diagonal(c: &Array2<f64>) -> bool {
    c.indexed_iter().all(|((i, j), &v)| i == j || v == 0.0)
}

/// Sidecar path for a bundle CSV: the extension is replaced by `meta.json`.
pub fn sidecar_path(csv_path: &std::path::Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

/// Responses path for regression bundles: extension `responses.csv`.
pub fn responses_path(csv_path: &std::path::Path) -> std::path::PathBuf {
    csv_path.with_extension("responses.csv")
}

fn write_state_csv(path: &std::path::Path, rows: impl Iterator<Item = (usize, usize, Vec<f64>)>, d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["system".to_string(), "t".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (system, t, vals) in rows {
        let mut rec = vec![system.to_string(), t.to_string()];
        rec.extend(vals.iter().map(|&v| jsonfmt::fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Persist a bundle as CSV (`system,t,x0,...,x{d-1}`) plus a JSON sidecar.
/// Regression bundles additionally write the paired response array.
pub fn write_bundle_csv(bundle: &TrajectoryBundle, path: &std::path::Path) -> Result<()> {
    let d = bundle.d();
    write_state_csv(
        path,
        bundle.trajectories.iter().flat_map(|tr| {
            tr.states
                .axis_iter(Axis(0))
                .enumerate()
                .map(move |(t, row)| (tr.system_index, t, row.to_vec()))
        }),
        d,
    )?;
    if bundle.mode == BundleMode::Regression {
        write_state_csv(
            &responses_path(path),
            bundle.trajectories.iter().flat_map(|tr| {
                let resp = tr.responses.as_ref().expect("regression bundle has responses");
                resp.axis_iter(Axis(0))
                    .enumerate()
                    .map(move |(t, row)| (tr.system_index, t, row.to_vec()))
                    .collect::<Vec<_>>()
            }),
            d,
        )?;
    }
    let noise = if is_diagonal(bundle.noise.covariance()) {
        NoiseSidecar {
            kind: "gaussian".into(),
            c_diag: Some(bundle.noise.covariance().diag().to_vec()),
            c: None,
            sigma_sq: bundle.noise.sigma_sq(),
        }
    } else {
        NoiseSidecar {
            kind: "gaussian".into(),
            c_diag: None,
            c: Some(bundle.noise.covariance().iter().copied().collect()),
            sigma_sq: bundle.noise.sigma_sq(),
        }
    };
    let sidecar = BundleSidecar {
        t: bundle.num_steps(),
        d,
        num_systems: bundle.num_systems(),
        mode: bundle.mode,
        noise,
        seed: bundle.seed,
    };
    jsonfmt::write_file(&sidecar, &sidecar_path(path))?;
    Ok(())
}

fn read_state_csv(
    path: &std::path::Path,
    t_len: usize,
    d: usize,
    num_systems: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != d + 2 || &headers[0] != "system" || &headers[1] != "t" {
        return Err(Error::Parse(format!("unexpected CSV header in {}", path.display())));
    }
    let mut arrays = vec![Array2::zeros((t_len + 1, d)); num_systems];
    let mut seen = vec![0usize; num_systems];
    for rec in rdr.records() {
        let rec = rec?;
        let system: usize =
            rec[0].parse().map_err(|_| Error::Parse(format!("bad system index {}", &rec[0])))?;
        let t: usize = rec[1].parse().map_err(|_| Error::Parse(format!("bad t {}", &rec[1])))?;
        if system >= num_systems || t > t_len {
            return Err(Error::Parse(format!("row (system={system}, t={t}) out of range")));
        }
        for j in 0..d {
            arrays[system][(t, j)] = rec[j + 2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad float {}", &rec[j + 2])))?;
        }
        seen[system] += 1;
    }
    for (m, &count) in seen.iter().enumerate() {
        if count != t_len + 1 {
            return Err(Error::Parse(format!("system {m} has {count} rows, expected {}", t_len + 1)));
        }
    }
    Ok(arrays)
}

/// Load a bundle persisted by [`write_bundle_csv`]. Noise draws are not part
/// of the on-disk format, so event checks on loaded bundles are unavailable.
pub fn read_bundle_csv(path: &std::path::Path) -> Result<TrajectoryBundle> {
    let sidecar: BundleSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let c = match (&sidecar.noise.c, &sidecar.noise.c_diag) {
        (Some(full), _) => Array2::from_shape_vec((sidecar.d, sidecar.d), full.clone())
            .map_err(|_| Error::Parse("noise covariance shape".into()))?,
        (None, Some(diag)) => Array2::from_diag(&Array1::from_vec(diag.clone())),
        (None, None) => return Err(Error::Parse("sidecar missing noise covariance".into())),
    };
    let noise = NoiseModel::gaussian(c)?;
    let states = read_state_csv(path, sidecar.t, sidecar.d, sidecar.num_systems)?;
    let responses = if sidecar.mode == BundleMode::Regression {
        Some(read_state_csv(&responses_path(path), sidecar.t, sidecar.d, sidecar.num_systems)?)
    } else {
        None
    };
    let trajectories = states
        .into_iter()
        .enumerate()
        .map(|(m, s)| Trajectory {
            states: s,
            responses: responses.as_ref().map(|r| r[m].clone()),
            system_index: m,
        })
        .collect();
    let mut bundle = TrajectoryBundle::new(trajectories, noise, sidecar.mode)?;
    bundle.seed = sidecar.seed;
    Ok(bundle)
}
