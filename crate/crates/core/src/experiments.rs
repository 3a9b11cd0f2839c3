//! Reproducible experiment harness.
//!
//! A sweep runs the full pipeline per `(M, replicate)` cell: draw a shared
//! basis and coefficients, rescale the spectral radii for the requested
//! regime, optionally inject misspecifications, simulate, then fit both the
//! joint estimator and per-system least squares on the same bundle and
//! record mean squared Frobenius errors. Every cell derives its own seed, so
//! results are byte-identical across runs and independent of scheduling.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::estimation_error;
use crate::dynamics::{simulate_bundle, NoiseModel, X0Policy};
use crate::ensemble::{
    build_from_jordan, compose_systems, generate_shared_basis, rescale_to_radius,
    sample_coefficients, sample_misspecification, uniform_radius_targets, JordanSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{joint_fit, ols_fit, select_k, FitConfig, SelectKOptions, SelectionPoint};
use crate::jsonfmt;
use crate::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegimeConfig {
    /// Per-system spectral radii drawn uniformly from `[lo, hi]`.
    StableRange { lo: f64, hi: f64 },
    /// Every system rescaled to spectral radius exactly one.
    UnitRoot,
}

impl RegimeConfig {
    pub fn label(&self) -> &'static str {
        match self {
            RegimeConfig::StableRange { .. } => "stable",
            RegimeConfig::UnitRoot => "unit_root",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisspecConfig {
    /// Inclusion probability exponent: each system deviates with probability
    /// `M^-a`.
    pub a: f64,
    /// Expected squared Frobenius mass of one deviation.
    pub fro_sq_target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub d: usize,
    pub k_true: usize,
    /// Basis count handed to the joint estimator; defaults to `k_true`.
    pub k_fit: Option<usize>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M_list")]
    pub m_list: Vec<usize>,
    pub regime: RegimeConfig,
    pub noise_variance: f64,
    pub misspec: Option<MisspecConfig>,
    pub replicates: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_true == 0 || self.t == 0 {
            return Err(Error::InvalidArgument("d, k, T must all be >= 1".into()));
        }
        if self.m_list.is_empty() {
            return Err(Error::InvalidArgument("M list is empty".into()));
        }
        if self.m_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("M list must be strictly ascending".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be >= 1".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::InvalidArgument("noise variance must be >= 0".into()));
        }
        if let RegimeConfig::StableRange { lo, hi } = self.regime {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidArgument(format!("bad radius range [{lo}, {hi}]")));
            }
        }
        self.fit.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Joint,
    Ols,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Joint => "joint",
            Method::Ols => "ols",
        }
    }
}

/// One aggregated sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub method: Method,
    pub regime: String,
    /// Misspecification exponent; absent for well-specified sweeps.
    pub a: Option<f64>,
    pub mean_error: f64,
    pub std_error: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, m: usize, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.m == m && r.method == method)
    }
}

/// Per-replicate errors of one cell, before aggregation.
struct CellOutcome {
    joint: f64,
    ols: f64,
}

fn run_cell(
    config: &SweepConfig,
    num_systems: usize,
    cell_seed: u64,
    a_exp: Option<f64>,
) -> Result<CellOutcome> {
    let basis = generate_shared_basis(
        config.k_true,
        config.d,
        stream::substream_seed(cell_seed, "sweep/basis", 0),
    )?;
    let coeffs = sample_coefficients(
        config.k_true,
        num_systems,
        stream::substream_seed(cell_seed, "sweep/coeffs", 0),
    )?;
    let ensemble = compose_systems(basis, coeffs, None)?;
    let targets = match config.regime {
        RegimeConfig::StableRange { lo, hi } => uniform_radius_targets(
            lo,
            hi,
            num_systems,
            stream::substream_seed(cell_seed, "sweep/radii", 0),
        )?,
        RegimeConfig::UnitRoot => vec![1.0; num_systems],
    };
    let mut ensemble = rescale_to_radius(ensemble, &targets, config.t)?;
    if let (Some(ms_cfg), Some(a)) = (&config.misspec, a_exp) {
        let ms = sample_misspecification(
            config.d,
            num_systems,
            a,
            ms_cfg.fro_sq_target,
            stream::substream_seed(cell_seed, "sweep/misspec", 0),
        )?;
        ensemble = ensemble.with_misspecification(ms)?;
    }
    let noise = NoiseModel::isotropic(config.d, config.noise_variance)?;
    let bundle = simulate_bundle(
        &ensemble,
        config.t,
        &noise,
        &X0Policy::Zero,
        stream::substream_seed(cell_seed, "sweep/dynamics", 0),
    )?;
    let fit_config = FitConfig {
        init_seed: stream::substream_seed(cell_seed, "sweep/fit", 0),
        ..config.fit
    };
    let k_fit = config.k_fit.unwrap_or(config.k_true);
    let joint = joint_fit(&bundle, k_fit, &fit_config)?;
    let ols = ols_fit(&bundle, 0.0)?;
    Ok(CellOutcome {
        joint: estimation_error(joint.a_hat(), &ensemble, "joint")?.mean(),
        ols: estimation_error(ols.a_hat(), &ensemble, "ols")?.mean(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sweep_once(config: &SweepConfig, a_exp: Option<f64>, jobs: usize) -> Result<SweepResult> {
    config.validate()?;
    if config.misspec.is_none() && a_exp.is_some() {
        return Err(Error::InvalidArgument("misspecification exponent without misspec config".into()));
    }
    // flat list of (M, replicate) cells, each with its own derived seed;
    // the seed does not depend on the misspecification exponent, so grids
    // over `a` are paired on identical data draws
    let mut cells = Vec::new();
    for (mi, &num_systems) in config.m_list.iter().enumerate() {
        for rep in 0..config.replicates {
            let index = (mi as u64) << 32 | rep as u64;
            cells.push((num_systems, stream::substream_seed(config.seed, "sweep/cell", index)));
        }
    }
    let outcomes: Vec<Result<CellOutcome>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|&(num_systems, cell_seed)| run_cell(config, num_systems, cell_seed, a_exp))
                .collect()
        })
    } else {
        cells
            .iter()
            .map(|&(num_systems, cell_seed)| run_cell(config, num_systems, cell_seed, a_exp))
            .collect()
    };

    let mut rows = Vec::with_capacity(config.m_list.len() * 2);
    for (mi, &num_systems) in config.m_list.iter().enumerate() {
        let mut joint_errors = Vec::with_capacity(config.replicates);
        let mut ols_errors = Vec::with_capacity(config.replicates);
        for rep in 0..config.replicates {
            match &outcomes[mi * config.replicates + rep] {
                Ok(cell) => {
                    joint_errors.push(cell.joint);
                    ols_errors.push(cell.ols);
                }
                Err(e) => {
                    return Err(Error::InvalidArgument(format!(
                        "cell (M={num_systems}, replicate={rep}) failed: {e}"
                    )))
                }
            }
        }
        let (mean_error, std_error) = mean_std(&joint_errors);
        rows.push(SweepRow {
            m: num_systems,
            method: Method::Joint,
            regime: config.regime.label().to_string(),
            a: a_exp,
            mean_error,
            std_error,
            replicates: config.replicates,
        });
        let (mean_error, std_error) = mean_std(&ols_errors);
        rows.push(SweepRow {
            m: num_systems,
            method: Method::Ols,
            regime: config.regime.label().to_string(),
            a: a_exp,
            mean_error,
            std_error,
            replicates: config.replicates,
        });
    }
    Ok(SweepResult { rows })
}

/// Error-versus-M sweep; joint and least squares always see the same bundle.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    run_sweep_with_jobs(config, 1)
}

pub fn run_sweep_with_jobs(config: &SweepConfig, jobs: usize) -> Result<SweepResult> {
    let a_exp = config.misspec.map(|m| m.a);
    sweep_once(config, a_exp, jobs)
}

/// One sweep per misspecification exponent, rows tagged with `a`.
pub fn run_misspec_grid(config: &SweepConfig, a_list: &[f64]) -> Result<SweepResult> {
    run_misspec_grid_with_jobs(config, a_list, 1)
}

pub fn run_misspec_grid_with_jobs(
    config: &SweepConfig,
    a_list: &[f64],
    jobs: usize,
) -> Result<SweepResult> {
    if config.misspec.is_none() {
        return Err(Error::InvalidArgument(
            "misspec grid requires a misspecification config".into(),
        ));
    }
    if a_list.is_empty() {
        return Err(Error::InvalidArgument("a list is empty".into()));
    }
    let mut rows = Vec::new();
    for &a in a_list {
        if !(a >= 0.0) {
            return Err(Error::InvalidArgument(format!("exponent a must be >= 0, got {a}")));
        }
        rows.extend(sweep_once(config, Some(a), jobs)?.rows);
    }
    Ok(SweepResult { rows })
}

// --- growth profiles ---------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub t: usize,
    /// `log ||x(t)||_2`; absent for zero-norm states.
    pub log_norm: Option<f64>,
}

/// Simulate one trajectory from a Jordan-structured system and return the
/// log-magnitude series.
pub fn state_growth_profile(
    spec: &JordanSpec,
    t_len: usize,
    noise: &NoiseModel,
    x0: &Array1<f64>,
    seed: u64,
) -> Result<Vec<GrowthPoint>> {
    if t_len < 10 {
        return Err(Error::InvalidArgument("growth profile needs T >= 10".into()));
    }
    let (a, _p) = build_from_jordan(spec, stream::substream_seed(seed, "growth/jordan", 0))?;
    let trajectory = crate::dynamics::simulate(
        &a,
        t_len,
        noise,
        x0,
        stream::substream_seed(seed, "growth/dynamics", 0),
    )?;
    Ok(trajectory
        .states()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            GrowthPoint { t, log_norm: (norm > 0.0).then(|| norm.ln()) }
        })
        .collect())
}

// --- model-selection experiment ----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub d: usize,
    pub k_true: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub num_systems: usize,
    pub k_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub regime: RegimeConfig,
    pub noise_variance: f64,
    pub fit: FitConfig,
    pub select: SelectKOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRun {
    pub run: usize,
    pub k_chosen: usize,
    pub curve: Vec<SelectionPoint>,
}

/// Repeat `select_k` on freshly generated data.
pub fn run_selection_experiment(config: &SelectionConfig) -> Result<Vec<SelectionRun>> {
    if config.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    let mut runs = Vec::with_capacity(config.replicates);
    for rep in 0..config.replicates {
        let cell_seed = stream::substream_seed(config.seed, "selection/run", rep as u64);
        let basis = generate_shared_basis(
            config.k_true,
            config.d,
            stream::substream_seed(cell_seed, "sweep/basis", 0),
        )?;
        let coeffs = sample_coefficients(
            config.k_true,
            config.num_systems,
            stream::substream_seed(cell_seed, "sweep/coeffs", 0),
        )?;
        let ensemble = compose_systems(basis, coeffs, None)?;
        let targets = match config.regime {
            RegimeConfig::StableRange { lo, hi } => uniform_radius_targets(
                lo,
                hi,
                config.num_systems,
                stream::substream_seed(cell_seed, "sweep/radii", 0),
            )?,
            RegimeConfig::UnitRoot => vec![1.0; config.num_systems],
        };
        let ensemble = rescale_to_radius(ensemble, &targets, config.t)?;
        let noise = NoiseModel::isotropic(config.d, config.noise_variance)?;
        let bundle = simulate_bundle(
            &ensemble,
            config.t,
            &noise,
            &X0Policy::Zero,
            stream::substream_seed(cell_seed, "sweep/dynamics", 0),
        )?;
        let fit = FitConfig {
            init_seed: stream::substream_seed(cell_seed, "sweep/fit", 0),
            ..config.fit
        };
        let (k_chosen, curve) = select_k(&bundle, &config.k_grid, &config.select, &fit)?;
        runs.push(SelectionRun { run: rep, k_chosen, curve });
    }
    Ok(runs)
}

// --- export -------------------------------------------------------------------

pub const SWEEP_CSV_HEADER: &str = "M,method,regime,a,mean_error,std_error,replicates";

/// Serialize a sweep result as CSV with 17-significant-digit floats.
pub fn sweep_to_csv(result: &SweepResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["M", "method", "regime", "a", "mean_error", "std_error", "replicates"])?;
    for row in &result.rows {
        w.write_record([
            row.m.to_string(),
            row.method.label().to_string(),
            row.regime.clone(),
            row.a.map(jsonfmt::fmt_f64).unwrap_or_default(),
            jsonfmt::fmt_f64(row.mean_error),
            jsonfmt::fmt_f64(row.std_error),
            row.replicates.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
}

pub fn sweep_from_csv(text: &str) -> Result<SweepResult> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Parse(format!("expected 7 columns, got {}", rec.len())));
        }
        let method = match &rec[1] {
            "joint" => Method::Joint,
            "ols" => Method::Ols,
            other => return Err(Error::Parse(format!("unknown method {other}"))),
        };
        rows.push(SweepRow {
            m: rec[0].parse().map_err(|_| Error::Parse(format!("bad M {}", &rec[0])))?,
            method,
            regime: rec[2].to_string(),
            a: if rec[3].is_empty() {
                None
            } else {
                Some(rec[3].parse().map_err(|_| Error::Parse(format!("bad a {}", &rec[3])))?)
            },
            mean_error: rec[4].parse().map_err(|_| Error::Parse("bad mean".into()))?,
            std_error: rec[5].parse().map_err(|_| Error::Parse("bad std".into()))?,
            replicates: rec[6].parse().map_err(|_| Error::Parse("bad replicates".into()))?,
        });
    }
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Write a sweep result to disk in the requested format.
pub fn export(result: &SweepResult, path: &std::path::Path, format: ExportFormat) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::InvalidArgument("refusing to export an empty result".into()));
    }
    match format {
        ExportFormat::Csv => std::fs::write(path, sweep_to_csv(result)?)?,
        ExportFormat::Json => jsonfmt::write_file(result, path)?,
    }
    Ok(())
}

/// Read a sweep result back, dispatching on the extension.
pub fn import(path: &std::path::Path) -> Result<SweepResult> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => sweep_from_csv(&text),
    }
}

/// Growth profiles as CSV rows `label,t,log_norm` (empty field for missing).
pub fn growth_to_csv(profiles: &[(String, Vec<GrowthPoint>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "t", "log_norm"])?;
    for (label, points) in profiles {
        for p in points {
            w.write_record([
                label.clone(),
                p.t.to_string(),
                p.log_norm.map(jsonfmt::fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
}

/// Selection runs as CSV rows `run,k,fit_error,validation_error,k_chosen`.
pub fn selection_to_csv(runs: &[SelectionRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "k", "fit_error", "validation_error", "k_chosen"])?;
    for r in runs {
        for p in &r.curve {
            w.write_record([
                r.run.to_string(),
                p.k.to_string(),
                jsonfmt::fmt_f64(p.fit_error),
                jsonfmt::fmt_f64(p.validation_error),
                r.k_chosen.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
}

/// Manifest recording the resolved config and a content hash per output
/// file, written next to the primary output as `<stem>.manifest.json`.
pub fn write_manifest<C: Serialize>(
    config: &C,
    outputs: &[&std::path::Path],
    primary: &std::path::Path,
) -> Result<std::path::PathBuf> {
    let mut files = serde_json::Map::new();
    for path in outputs {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        files.insert(
            path.file_name().and_then(|n| n.to_str()).unwrap_or("output").to_string(),
            serde_json::json!({ "sha256": hex, "bytes": bytes.len() }),
        );
    }
    let doc = serde_json::json!({
        "config": serde_json::to_value(config)?,
        "outputs": serde_json::Value::Object(files),
    });
    let manifest_path = primary.with_extension("manifest.json");
    jsonfmt::write_file(&doc, &manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::JordanBlock;
    use approx::assert_abs_diff_eq;

    fn desk_config(m_list: Vec<usize>, replicates: usize, seed: u64) -> SweepConfig {
        SweepConfig {
            d: 6,
            k_true: 2,
            k_fit: None,
            t: 60,
            m_list,
            regime: RegimeConfig::StableRange { lo: 0.7, hi: 0.9 },
            noise_variance: 1.0,
            misspec: None,
            replicates,
            seed,
            fit: FitConfig::default(),
        }
    }

    #[test]
    fn sweep_produces_one_row_per_cell() {
        let result = run_sweep(&desk_config(vec![1, 4, 8], 2, 5)).unwrap();
        assert_eq!(result.rows.len(), 6);
        for &m in &[1usize, 4, 8] {
            assert!(result.row(m, Method::Joint).is_some());
            assert!(result.row(m, Method::Ols).is_some());
        }
        for row in &result.rows {
            assert!(row.std_error >= 0.0);
            assert_eq!(row.replicates, 2);
            assert_eq!(row.regime, "stable");
            assert_eq!(row.a, None);
        }
    }

    #[test]
    fn sweep_is_deterministic_and_jobs_invariant() {
        let config = desk_config(vec![2, 5], 3, 11);
        let r1 = run_sweep(&config).unwrap();
        let r2 = run_sweep(&config).unwrap();
        assert_eq!(sweep_to_csv(&r1).unwrap(), sweep_to_csv(&r2).unwrap());
        let r4 = run_sweep_with_jobs(&config, 4).unwrap();
        assert_eq!(sweep_to_csv(&r1).unwrap(), sweep_to_csv(&r4).unwrap());
    }

    #[test]
    fn joint_error_decreases_with_m_at_desk_scale() {
        let config = SweepConfig { t: 80, ..desk_config(vec![1, 5, 20], 4, 21) };
        let result = run_sweep(&config).unwrap();
        let joint: Vec<f64> = [1usize, 5, 20]
            .iter()
            .map(|&m| result.row(m, Method::Joint).unwrap().mean_error)
            .collect();
        assert!(joint[2] < joint[0], "joint error did not shrink: {joint:?}");
        // pooled-std monotonicity
        for w in result.rows.chunks(2).collect::<Vec<_>>().windows(2) {
            let (a, b) = (w[0][0].clone(), w[1][0].clone());
            assert!(
                b.mean_error <= a.mean_error + a.std_error + b.std_error,
                "{a:?} -> {b:?}"
            );
        }
    }

    #[test]
    fn joint_error_floor_does_not_collapse() {
        // at the largest M the k/T floor keeps the joint error from falling
        // another 10x when M doubles
        let config = SweepConfig { t: 80, ..desk_config(vec![10, 20], 4, 23) };
        let result = run_sweep(&config).unwrap();
        let at_10 = result.row(10, Method::Joint).unwrap().mean_error;
        let at_20 = result.row(20, Method::Joint).unwrap().mean_error;
        assert!(at_20 >= 0.1 * at_10, "floor collapsed: {at_10} -> {at_20}");
    }

    #[test]
    fn saturated_fit_matches_ols_rows() {
        let config = SweepConfig {
            d: 3,
            k_true: 2,
            k_fit: Some(9),
            t: 40,
            m_list: vec![1],
            regime: RegimeConfig::StableRange { lo: 0.7, hi: 0.9 },
            noise_variance: 1.0,
            misspec: None,
            replicates: 3,
            seed: 31,
            fit: FitConfig {
                ridge: crate::estimators::RidgePolicy::Fixed(0.0),
                ..FitConfig::default()
            },
        };
        let result = run_sweep(&config).unwrap();
        let joint = result.row(1, Method::Joint).unwrap().mean_error;
        let ols = result.row(1, Method::Ols).unwrap().mean_error;
        assert_abs_diff_eq!(joint, ols, epsilon = 1e-6 * ols.max(1.0));
    }

    #[test]
    fn zero_mass_misspecification_reproduces_clean_sweep() {
        let clean = desk_config(vec![2, 4], 2, 41);
        let with_zero = SweepConfig {
            misspec: Some(MisspecConfig { a: 0.0, fro_sq_target: 0.0 }),
            ..clean.clone()
        };
        let r_clean = run_sweep(&clean).unwrap();
        let r_zero = run_sweep(&with_zero).unwrap();
        for (a, b) in r_clean.rows.iter().zip(&r_zero.rows) {
            assert_abs_diff_eq!(a.mean_error, b.mean_error, epsilon = 0.0);
            assert_abs_diff_eq!(a.std_error, b.std_error, epsilon = 0.0);
        }
    }

    #[test]
    fn misspec_grid_tags_rows() {
        let config = SweepConfig {
            misspec: Some(MisspecConfig { a: 0.0, fro_sq_target: 0.5 }),
            ..desk_config(vec![2, 4], 2, 43)
        };
        let result = run_misspec_grid(&config, &[0.0, 0.5]).unwrap();
        assert_eq!(result.rows.len(), 8);
        assert!(result.rows[..4].iter().all(|r| r.a == Some(0.0)));
        assert!(result.rows[4..].iter().all(|r| r.a == Some(0.5)));
    }

    #[test]
    fn growth_profile_flat_for_scalar_unit_eigenvalue() {
        let spec =
            JordanSpec::new(vec![JordanBlock { eigenvalue: 1.0, size: 1 }; 4], 1.0).unwrap();
        let noise = NoiseModel::isotropic(4, 0.0).unwrap();
        let mut x0 = Array1::zeros(4);
        x0[0] = 1.0;
        let profile = state_growth_profile(&spec, 50, &noise, &x0, 3).unwrap();
        assert_eq!(profile.len(), 51);
        let first = profile[0].log_norm.unwrap();
        for p in &profile {
            assert_abs_diff_eq!(p.log_norm.unwrap(), first, epsilon = 1e-9);
        }
    }

    #[test]
    fn growth_profile_slope_matches_block_size() {
        // noiseless l = 2 at unit root grows like t, slope -> 1
        let spec = JordanSpec::new(
            vec![JordanBlock { eigenvalue: 1.0, size: 2 }, JordanBlock { eigenvalue: 1.0, size: 1 }],
            1.0,
        )
        .unwrap();
        let noise = NoiseModel::isotropic(3, 0.0).unwrap();
        let mut x0 = Array1::zeros(3);
        x0[2] = 1.0;
        let profile = state_growth_profile(&spec, 400, &noise, &x0, 5).unwrap();
        let pts: Vec<(usize, Option<f64>)> = profile.iter().map(|p| (p.t, p.log_norm)).collect();
        let slope = crate::diagnostics::growth_slope(&pts).unwrap();
        assert!((slope - 1.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn growth_profiles_order_by_block_size() {
        let noise = NoiseModel::isotropic(32, 1.0).unwrap();
        let mut terminal = Vec::new();
        for &l in &[2usize, 4, 8, 16] {
            let mut blocks = vec![JordanBlock { eigenvalue: 0.99, size: l }];
            blocks.extend(vec![JordanBlock { eigenvalue: 0.99, size: 1 }; 32 - l]);
            let spec = JordanSpec::new(blocks, 1.0).unwrap();
            let x0 = Array1::zeros(32);
            let profile = state_growth_profile(&spec, 300, &noise, &x0, 7).unwrap();
            terminal.push(profile.last().unwrap().log_norm.unwrap());
        }
        for w in terminal.windows(2) {
            assert!(w[1] > w[0], "terminal magnitudes not increasing: {terminal:?}");
        }
    }

    #[test]
    fn selection_experiment_recovers_truth() {
        let config = SelectionConfig {
            d: 8,
            k_true: 2,
            t: 80,
            num_systems: 15,
            k_grid: vec![1, 2, 3, 4],
            replicates: 3,
            seed: 17,
            regime: RegimeConfig::StableRange { lo: 0.7, hi: 0.9 },
            noise_variance: 1.0,
            fit: FitConfig::default(),
            select: SelectKOptions::default(),
        };
        let runs = run_selection_experiment(&config).unwrap();
        assert_eq!(runs.len(), 3);
        for r in &runs {
            assert!(r.k_chosen == 2 || r.k_chosen == 3, "chose {}", r.k_chosen);
            assert_eq!(r.curve.len(), 4);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let result = run_sweep(&desk_config(vec![1, 3], 2, 53)).unwrap();
        let text = sweep_to_csv(&result).unwrap();
        assert!(text.starts_with(SWEEP_CSV_HEADER));
        let back = sweep_from_csv(&text).unwrap();
        assert_eq!(result, back);
        // 4 data rows + header
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn export_and_import_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_sweep(&desk_config(vec![1, 3], 2, 54)).unwrap();
        let csv_path = dir.path().join("r.csv");
        let json_path = dir.path().join("r.json");
        export(&result, &csv_path, ExportFormat::Csv).unwrap();
        export(&result, &json_path, ExportFormat::Json).unwrap();
        assert_eq!(import(&csv_path).unwrap(), result);
        assert_eq!(import(&json_path).unwrap(), result);
        let empty = SweepResult::default();
        assert!(export(&empty, &csv_path, ExportFormat::Csv).is_err());
    }

    #[test]
    fn manifest_records_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_sweep(&desk_config(vec![1], 1, 55)).unwrap();
        let csv_path = dir.path().join("out.csv");
        export(&result, &csv_path, ExportFormat::Csv).unwrap();
        let config = desk_config(vec![1], 1, 55);
        let manifest = write_manifest(&config, &[&csv_path], &csv_path).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(doc["config"]["seed"], 55);
        let hash = doc["outputs"]["out.csv"]["sha256"].as_str().unwrap();
        assert_eq!(hash.len(), 64);
    }
}
