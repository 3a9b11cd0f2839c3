//! Command-line entry point for the full pipeline: ensemble generation,
//! simulation, fitting, diagnostics, and the experiment sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical/runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};

use jointlti::dynamics::{
    read_bundle_csv, simulate_bundle, write_bundle_csv, NoiseModel, X0Policy,
};
use jointlti::ensemble::{
    compose_systems, generate_shared_basis, rescale_to_radius, sample_coefficients,
    sample_misspecification, uniform_radius_targets, JordanBlock, JordanSpec, SystemEnsemble,
};
use jointlti::estimators::{
    joint_fit, ols_fit, FitConfig, Optimizer, RidgePolicy, SelectKOptions, ValidationSplit,
};
use jointlti::experiments::{
    self, run_misspec_grid_with_jobs, run_selection_experiment, run_sweep_with_jobs, ExportFormat,
    MisspecConfig, RegimeConfig, SelectionConfig, SweepConfig,
};
use jointlti::{diagnostics, jsonfmt, plot, stream};

#[derive(Parser)]
#[command(
    name = "jointlti",
    about = "Joint estimation of transition matrices for families of related LTI systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shared-basis system ensemble and write it as JSON.
    Generate(GenerateArgs),
    /// Simulate a trajectory bundle from an ensemble (CSV + JSON sidecar).
    Simulate(SimulateArgs),
    /// Fit transition matrices from a bundle (joint estimator or OLS).
    Fit(FitArgs),
    /// Covariance / spectral diagnostics for a bundle against its ensemble.
    Diagnose(DiagnoseArgs),
    /// Error-versus-M sweep over freshly generated data.
    Sweep(SweepArgs),
    /// Sweep across misspecification exponents.
    MisspecGrid(MisspecGridArgs),
    /// State-growth profiles for Jordan-structured systems.
    Growth(GrowthArgs),
    /// Model selection over a grid of basis counts.
    SelectK(SelectKArgs),
    /// Convert a stored sweep result between CSV and JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Root seed; all randomness is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the resolved plan without computing.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 25)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long = "M", default_value_t = 10)]
    num_systems: usize,
    /// stable | unit-root
    #[arg(long, default_value = "stable")]
    regime: String,
    #[arg(long, default_value_t = 0.7)]
    radius_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    radius_hi: f64,
    /// Nominal horizon used for the spectral-radius budget.
    #[arg(long = "T", default_value_t = 200)]
    t: usize,
    /// Misspecification exponent a (deviations added with probability M^-a).
    #[arg(long)]
    misspec_a: Option<f64>,
    /// Expected squared Frobenius mass per deviation.
    #[arg(long, default_value_t = 6.25)]
    misspec_fro: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long = "T", default_value_t = 200)]
    t: usize,
    #[arg(long, default_value_t = 4.0)]
    noise_var: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    bundle: PathBuf,
    /// joint | ols
    #[arg(long, default_value = "joint")]
    method: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// als | gd
    #[arg(long, default_value = "als")]
    optimizer: String,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Fixed ridge epsilon; omitted = adaptive default.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    gd_step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Spectral-radius budget rho in |lambda_1| <= 1 + rho/T.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-system rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 25)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    k_fit: Option<usize>,
    #[arg(long = "T", default_value_t = 200)]
    t: usize,
    /// Comma-separated list of system counts.
    #[arg(long = "M", value_delimiter = ',', default_values_t = vec![1, 10, 20, 50, 100, 200])]
    m_list: Vec<usize>,
    /// stable | unit-root
    #[arg(long, default_value = "stable")]
    regime: String,
    #[arg(long, default_value_t = 0.7)]
    radius_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    radius_hi: f64,
    #[arg(long, default_value_t = 4.0)]
    noise_var: f64,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Skip the SVG next to the CSV.
    #[arg(long, default_value_t = false)]
    no_plot: bool,
}

#[derive(Args)]
struct MisspecGridArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Comma-separated misspecification exponents.
    #[arg(long = "a-list", value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5])]
    a_list: Vec<f64>,
    #[arg(long, default_value_t = 6.25)]
    misspec_fro: f64,
}

#[derive(Args)]
struct GrowthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Eigenvalue of the leading Jordan block.
    #[arg(long, default_value_t = 0.99)]
    lambda: f64,
    /// Comma-separated block sizes; one profile per size.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 8, 16])]
    blocks: Vec<usize>,
    #[arg(long = "T", default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    no_plot: bool,
}

#[derive(Args)]
struct SelectKArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 25)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    k_true: usize,
    #[arg(long = "T", default_value_t = 250)]
    t: usize,
    #[arg(long = "M", default_value_t = 50)]
    num_systems: usize,
    /// Comma-separated basis-count grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, default_value_t = 4.0)]
    noise_var: f64,
    /// Held-out fraction (trailing time steps per system).
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Hold out systems instead of time steps.
    #[arg(long, default_value_t = false)]
    holdout_systems: bool,
    #[arg(long, default_value_t = 0.05)]
    elbow_slack: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    no_plot: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "in")]
    input: PathBuf,
    /// csv | json
    #[arg(long)]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(jointlti::Error),
}

impl From<jointlti::Error> for CliError {
    fn from(e: jointlti::Error) -> Self {
        match e {
            jointlti::Error::InvalidArgument(_) | jointlti::Error::Parse(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other),
        }
    }
}

type CliResult = Result<(), CliError>;

fn usage<T: std::fmt::Display>(msg: T) -> CliError {
    CliError::Usage(msg.to_string())
}

fn main() -> ExitCode {
    use clap::{CommandFactory, FromArgMatches};
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args, sub),
        Command::Simulate(args) => cmd_simulate(args, sub),
        Command::Fit(args) => cmd_fit(args, sub),
        Command::Diagnose(args) => cmd_diagnose(args, sub),
        Command::Sweep(args) => cmd_sweep(args, sub),
        Command::MisspecGrid(args) => cmd_misspec_grid(args, sub),
        Command::Growth(args) => cmd_growth(args, sub),
        Command::SelectK(args) => cmd_select_k(args, sub),
        Command::Export(args) => cmd_export(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Resolve the effective plan: config-file values fill anything not given
/// explicitly on the command line; explicit flags always win. The resolved
/// plan is printed before execution.
///
/// `field_map` maps clap argument ids to (dotted) JSON paths in the plan
/// when the two differ.
fn resolve_config<T: serde::Serialize + serde::de::DeserializeOwned>(
    name: &str,
    from_flags: &T,
    config_path: Option<&Path>,
    matches: &clap::ArgMatches,
    field_map: &[(&str, &str)],
) -> Result<T, CliError> {
    let flag_value = serde_json::to_value(from_flags).map_err(usage)?;
    let resolved = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let config: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("bad config JSON: {e}")))?;
            if !config.is_object() {
                return Err(usage("config file must hold a JSON object"));
            }
            // start from the flag values (so unset config fields keep their
            // defaults), overlay the file, then re-apply explicit flags
            let mut base = flag_value.clone();
            merge_json(&mut base, &config);
            for id in matches.ids() {
                if matches.value_source(id.as_str())
                    != Some(clap::parser::ValueSource::CommandLine)
                {
                    continue;
                }
                let path = field_map
                    .iter()
                    .find(|(fid, _)| *fid == id.as_str())
                    .map(|(_, p)| *p)
                    .unwrap_or(id.as_str());
                if let Some(v) = json_path_get(&flag_value, path) {
                    json_path_set(&mut base, path, v.clone());
                }
            }
            base
        }
        None => flag_value,
    };
    println!("resolved {name} config: {}", jsonfmt::to_string(&resolved).map_err(CliError::from)?);
    serde_json::from_value(resolved).map_err(|e| usage(format!("bad config: {e}")))
}

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn json_path_get<'a>(v: &'a serde_json::Value, path: &str) -> Option<&'a serde_json::Value> {
    path.split('.').try_fold(v, |acc, key| acc.get(key))
}

fn json_path_set(v: &mut serde_json::Value, path: &str, value: serde_json::Value) {
    let mut cursor = v;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = match cursor.as_object_mut() {
            Some(o) => o,
            None => return,
        };
        if i + 1 == parts.len() {
            obj.insert((*key).to_string(), value);
            return;
        }
        cursor = obj.entry((*key).to_string()).or_insert_with(|| serde_json::json!({}));
    }
}

fn parse_regime(name: &str, lo: f64, hi: f64) -> Result<RegimeConfig, CliError> {
    match name {
        "stable" => Ok(RegimeConfig::StableRange { lo, hi }),
        "unit-root" | "unit_root" => Ok(RegimeConfig::UnitRoot),
        other => Err(usage(format!("unknown regime '{other}' (stable | unit-root)"))),
    }
}

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn cmd_generate(args: GenerateArgs, matches: &clap::ArgMatches) -> CliResult {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Plan {
        d: usize,
        k: usize,
        #[serde(rename = "M")]
        num_systems: usize,
        regime: String,
        radius_lo: f64,
        radius_hi: f64,
        #[serde(rename = "T")]
        t: usize,
        misspec_a: Option<f64>,
        misspec_fro: f64,
        seed: u64,
        out: PathBuf,
    }
    let plan = resolve_config(
        "generate",
        &Plan {
            d: args.d,
            k: args.k,
            num_systems: args.num_systems,
            regime: args.regime.clone(),
            radius_lo: args.radius_lo,
            radius_hi: args.radius_hi,
            t: args.t,
            misspec_a: args.misspec_a,
            misspec_fro: args.misspec_fro,
            seed: args.common.seed,
            out: args.out.clone(),
        },
        args.common.config.as_deref(),
        matches,
        &[("num_systems", "M"), ("t", "T")],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let regime = parse_regime(&plan.regime, plan.radius_lo, plan.radius_hi)?;
    let basis =
        generate_shared_basis(plan.k, plan.d, stream::substream_seed(plan.seed, "cli/basis", 0))?;
    let coeffs = sample_coefficients(
        plan.k,
        plan.num_systems,
        stream::substream_seed(plan.seed, "cli/coeffs", 0),
    )?;
    let ensemble = compose_systems(basis, coeffs, None)?;
    let targets = match regime {
        RegimeConfig::StableRange { lo, hi } => uniform_radius_targets(
            lo,
            hi,
            plan.num_systems,
            stream::substream_seed(plan.seed, "cli/radii", 0),
        )?,
        RegimeConfig::UnitRoot => vec![1.0; plan.num_systems],
    };
    let mut ensemble = rescale_to_radius(ensemble, &targets, plan.t)?;
    if let Some(a) = plan.misspec_a {
        let ms = sample_misspecification(
            plan.d,
            plan.num_systems,
            a,
            plan.misspec_fro,
            stream::substream_seed(plan.seed, "cli/misspec", 0),
        )?;
        ensemble = ensemble.with_misspecification(ms)?;
    }
    ensemble.set_provenance("seed", plan.seed);
    ensemble.save(&plan.out)?;
    println!("wrote {}", plan.out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, matches: &clap::ArgMatches) -> CliResult {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Plan {
        ensemble: PathBuf,
        #[serde(rename = "T")]
        t: usize,
        noise_var: f64,
        seed: u64,
        out: PathBuf,
    }
    let plan = resolve_config(
        "simulate",
        &Plan {
            ensemble: args.ensemble,
            t: args.t,
            noise_var: args.noise_var,
            seed: args.common.seed,
            out: args.out,
        },
        args.common.config.as_deref(),
        matches,
        &[("t", "T")],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let ensemble = SystemEnsemble::load(&plan.ensemble)?;
    let noise = NoiseModel::isotropic(ensemble.d(), plan.noise_var)?;
    let bundle = simulate_bundle(&ensemble, plan.t, &noise, &X0Policy::Zero, plan.seed)?;
    write_bundle_csv(&bundle, &plan.out)?;
    println!("wrote {}", plan.out.display());
    Ok(())
}

fn cmd_fit(args: FitArgs, matches: &clap::ArgMatches) -> CliResult {
    let optimizer = match args.optimizer.as_str() {
        "als" => Optimizer::Als,
        "gd" => Optimizer::Gd,
        other => return Err(usage(format!("unknown optimizer '{other}' (als | gd)"))),
    };
    let config = FitConfig {
        optimizer,
        max_iters: args.max_iters,
        tol: args.tol,
        restarts: args.restarts,
        ridge: match args.ridge {
            Some(eps) => RidgePolicy::Fixed(eps),
            None => RidgePolicy::Adaptive { scale: 1e-8 },
        },
        init_seed: args.common.seed,
        gd_step: args.gd_step,
    };
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Plan {
        bundle: PathBuf,
        method: String,
        k: usize,
        fit: FitConfig,
        out: PathBuf,
    }
    let plan = resolve_config(
        "fit",
        &Plan {
            bundle: args.bundle.clone(),
            method: args.method.clone(),
            k: args.k,
            fit: config,
            out: args.out.clone(),
        },
        args.common.config.as_deref(),
        matches,
        &[
            ("seed", "fit.init_seed"),
            ("optimizer", "fit.optimizer"),
            ("max_iters", "fit.max_iters"),
            ("tol", "fit.tol"),
            ("restarts", "fit.restarts"),
            ("ridge", "fit.ridge"),
            ("gd_step", "fit.gd_step"),
        ],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let bundle = read_bundle_csv(&plan.bundle)?;
    let doc = match plan.method.as_str() {
        "joint" => {
            let fit = joint_fit(&bundle, plan.k, &plan.fit)?;
            serde_json::json!({
                "method": "joint",
                "config": serde_json::to_value(&plan.fit).map_err(jointlti::Error::from)?,
                "k": plan.k,
                "d": bundle.d(),
                "M": bundle.num_systems(),
                "W_hat": fit.w_hat().iter().map(row_major).collect::<Vec<_>>(),
                "B_hat": row_major(fit.b_hat()),
                "A_hat": fit.a_hat().iter().map(row_major).collect::<Vec<_>>(),
                "loss_trace": fit.loss_trace(),
                "final_loss": fit.final_loss(),
                "converged": fit.converged(),
                "best_restart": fit.best_restart(),
                "bundle_seed": bundle.seed(),
            })
        }
        "ols" => {
            let fit = ols_fit(&bundle, 0.0)?;
            serde_json::json!({
                "method": "ols",
                "ridge_used": fit.ridge_used(),
                "d": bundle.d(),
                "M": bundle.num_systems(),
                "A_hat": fit.a_hat().iter().map(row_major).collect::<Vec<_>>(),
                "per_system_residual": fit.per_system_residual(),
                "bundle_seed": bundle.seed(),
            })
        }
        other => return Err(usage(format!("unknown method '{other}' (joint | ols)"))),
    };
    jsonfmt::write_file(&doc, &plan.out)?;
    println!("wrote {}", plan.out.display());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs, matches: &clap::ArgMatches) -> CliResult {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Plan {
        ensemble: PathBuf,
        bundle: PathBuf,
        delta: f64,
        rho: Option<f64>,
        out: PathBuf,
        csv: Option<PathBuf>,
    }
    let plan = resolve_config(
        "diagnose",
        &Plan {
            ensemble: args.ensemble,
            bundle: args.bundle,
            delta: args.delta,
            rho: args.rho,
            out: args.out,
            csv: args.csv,
        },
        args.common.config.as_deref(),
        matches,
        &[],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let ensemble = SystemEnsemble::load(&plan.ensemble)?;
    let bundle = read_bundle_csv(&plan.bundle)?;
    let rho = plan.rho.unwrap_or_else(|| ensemble.rho_slack());
    let report = diagnostics::covariance_report(&bundle, &ensemble, plan.delta, rho)?;
    let mut body = report.to_json()?;
    body.push('\n');
    std::fs::write(&plan.out, body).map_err(jointlti::Error::from)?;
    if let Some(csv_path) = &plan.csv {
        std::fs::write(csv_path, report.to_csv()?).map_err(jointlti::Error::from)?;
    }
    println!(
        "kappa = {}, kappa_infty = {}, wrote {}",
        report.kappa,
        report.kappa_infty,
        plan.out.display()
    );
    Ok(())
}

fn sweep_config_from_args(
    args: &SweepArgs,
    misspec: Option<MisspecConfig>,
) -> Result<SweepConfig, CliError> {
    let regime = parse_regime(&args.regime, args.radius_lo, args.radius_hi)?;
    Ok(SweepConfig {
        d: args.d,
        k_true: args.k,
        k_fit: args.k_fit,
        t: args.t,
        m_list: args.m_list.clone(),
        regime,
        noise_variance: args.noise_var,
        misspec,
        replicates: args.replicates,
        seed: args.common.seed,
        fit: FitConfig::default(),
    })
}

fn cmd_sweep(args: SweepArgs, matches: &clap::ArgMatches) -> CliResult {
    let config = sweep_config_from_args(&args, None)?;
    let config: SweepConfig = resolve_config(
        "sweep",
        &config,
        args.common.config.as_deref(),
        matches,
        &[
            ("k", "k_true"),
            ("t", "T"),
            ("m_list", "M_list"),
            ("noise_var", "noise_variance"),
            ("regime", "regime"),
            ("radius_lo", "regime"),
            ("radius_hi", "regime"),
        ],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let result = run_sweep_with_jobs(&config, args.jobs.max(1))?;
    finish_sweep(&config, &result, &args.out, args.no_plot)
}

fn cmd_misspec_grid(args: MisspecGridArgs, matches: &clap::ArgMatches) -> CliResult {
    let misspec = MisspecConfig {
        a: args.a_list.first().copied().unwrap_or(0.0),
        fro_sq_target: args.misspec_fro,
    };
    let config = sweep_config_from_args(&args.sweep, Some(misspec))?;
    let config: SweepConfig = resolve_config(
        "misspec-grid",
        &config,
        args.sweep.common.config.as_deref(),
        matches,
        &[
            ("k", "k_true"),
            ("t", "T"),
            ("m_list", "M_list"),
            ("noise_var", "noise_variance"),
            ("regime", "regime"),
            ("radius_lo", "regime"),
            ("radius_hi", "regime"),
            ("a_list", "misspec"),
            ("misspec_fro", "misspec"),
        ],
    )?;
    if args.sweep.common.dry_run {
        return Ok(());
    }
    let result = run_misspec_grid_with_jobs(&config, &args.a_list, args.sweep.jobs.max(1))?;
    finish_sweep(&config, &result, &args.sweep.out, args.sweep.no_plot)
}

fn finish_sweep(
    config: &SweepConfig,
    result: &experiments::SweepResult,
    out: &Path,
    no_plot: bool,
) -> CliResult {
    experiments::export(result, out, ExportFormat::Csv)?;
    let mut outputs: Vec<PathBuf> = vec![out.to_path_buf()];
    if !no_plot {
        let svg = out.with_extension("svg");
        plot::render_sweep_plot(result, &svg)?;
        outputs.push(svg);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    let manifest = experiments::write_manifest(config, &refs, out)?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_growth(args: GrowthArgs, matches: &clap::ArgMatches) -> CliResult {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Plan {
        d: usize,
        lambda: f64,
        blocks: Vec<usize>,
        #[serde(rename = "T")]
        t: usize,
        noise_var: f64,
        seed: u64,
        out: PathBuf,
    }
    let plan = resolve_config(
        "growth",
        &Plan {
            d: args.d,
            lambda: args.lambda,
            blocks: args.blocks,
            t: args.t,
            noise_var: args.noise_var,
            seed: args.common.seed,
            out: args.out,
        },
        args.common.config.as_deref(),
        matches,
        &[("t", "T")],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let noise = NoiseModel::isotropic(plan.d, plan.noise_var)?;
    let mut profiles = Vec::new();
    for (i, &l) in plan.blocks.iter().enumerate() {
        if l > plan.d {
            return Err(usage(format!("block size {l} exceeds d = {}", plan.d)));
        }
        let mut blocks = vec![JordanBlock { eigenvalue: plan.lambda, size: l }];
        blocks.extend(vec![JordanBlock { eigenvalue: plan.lambda, size: 1 }; plan.d - l]);
        let spec = JordanSpec::new(blocks, 1.0)?;
        let mut x0 = Array1::zeros(plan.d);
        x0[plan.d - 1] = 1.0;
        let profile = experiments::state_growth_profile(
            &spec,
            plan.t,
            &noise,
            &x0,
            stream::substream_seed(plan.seed, "cli/growth", i as u64),
        )?;
        profiles.push((format!("l={l}"), profile));
    }
    std::fs::write(&plan.out, experiments::growth_to_csv(&profiles)?)
        .map_err(jointlti::Error::from)?;
    println!("wrote {}", plan.out.display());
    if !args.no_plot {
        let svg = plan.out.with_extension("svg");
        plot::render_growth_plot(&profiles, &svg)?;
        println!("wrote {}", svg.display());
    }
    Ok(())
}

fn cmd_select_k(args: SelectKArgs, matches: &clap::ArgMatches) -> CliResult {
    let split = if args.holdout_systems {
        ValidationSplit::Systems(args.holdout)
    } else {
        ValidationSplit::TrailingSteps(args.holdout)
    };
    let config = SelectionConfig {
        d: args.d,
        k_true: args.k_true,
        t: args.t,
        num_systems: args.num_systems,
        k_grid: args.grid.clone(),
        replicates: args.replicates,
        seed: args.common.seed,
        regime: RegimeConfig::StableRange { lo: 0.7, hi: 0.9 },
        noise_variance: args.noise_var,
        fit: FitConfig::default(),
        select: SelectKOptions { split, elbow_slack: args.elbow_slack },
    };
    let config: SelectionConfig = resolve_config(
        "select-k",
        &config,
        args.common.config.as_deref(),
        matches,
        &[
            ("t", "T"),
            ("num_systems", "M"),
            ("grid", "k_grid"),
            ("noise_var", "noise_variance"),
            ("holdout", "select"),
            ("holdout_systems", "select"),
            ("elbow_slack", "select"),
        ],
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let runs = run_selection_experiment(&config)?;
    std::fs::write(&args.out, experiments::selection_to_csv(&runs)?)
        .map_err(jointlti::Error::from)?;
    println!("wrote {}", args.out.display());
    if !args.no_plot {
        let svg = args.out.with_extension("svg");
        plot::render_selection_plot(&runs, &svg)?;
        println!("wrote {}", svg.display());
    }
    let chosen: Vec<usize> = runs.iter().map(|r| r.k_chosen).collect();
    println!("chosen k per run: {chosen:?}");
    Ok(())
}

fn cmd_export(args: ExportArgs) -> CliResult {
    let format = match args.format.as_str() {
        "csv" => ExportFormat::Csv,
        "json" => ExportFormat::Json,
        other => return Err(usage(format!("unknown format '{other}' (csv | json)"))),
    };
    println!(
        "resolved export config: {{\"in\":{:?},\"format\":{:?},\"out\":{:?}}}",
        args.input, args.format, args.out
    );
    if args.common.dry_run {
        return Ok(());
    }
    let result = experiments::import(&args.input)?;
    experiments::export(&result, &args.out, format)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
