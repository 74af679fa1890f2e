//! Subcommand implementations: fit, test, cv, predict, simulate, residuals.

use crate::artifacts::FitArtifact;
use crate::manifest::Manifest;
use clap::{Args, Parser, Subcommand};
use coxsurf_core::sim::{CvExperiment, ExperimentConfig, Metric, ScenarioConfig};
use coxsurf_core::{
    breslow_baseline, build_risk_index, default_grid, deviance_residuals, martingale_residuals,
    partition_folds, pointwise_ci, tune_all, variance_estimates, wald_test, BasisSettings,
    ContrastKind, CsvSchema, CvMethod, Dataset, EvalContext, PenaltyConfig, SolverConfig,
    TestConstruction, VarianceKind,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "coxsurf",
    version,
    about = "Stratified competing-risks Cox models with bivariate varying-coefficient surfaces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit a (optionally penalized) bivariate varying-coefficient model.
    Fit(FitArgs),
    /// Wald tests of effect variation on a stored fit.
    Test(TestArgs),
    /// Tune smoothing parameters by cross-validation.
    Cv(CvArgs),
    /// Surface estimates with pointwise confidence intervals on a grid.
    Predict(PredictArgs),
    /// Generate synthetic data, or run a Monte Carlo experiment.
    Simulate(SimulateArgs),
    /// Martingale or deviance residuals of a stored fit.
    Residuals(ResidualsArgs),
}

#[derive(Args)]
pub struct DataArgs {
    /// Input dataset (CSV, header required, '#' comments allowed).
    #[arg(long)]
    pub data: PathBuf,
    /// Columns with bivariate varying coefficients (comma-separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub z_cols: Vec<String>,
    /// Columns with invariant coefficients (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub w_cols: Vec<String>,
    #[arg(long, default_value = "stratum")]
    pub stratum_col: String,
    #[arg(long, default_value = "time")]
    pub time_col: String,
    #[arg(long, default_value = "cause")]
    pub cause_col: String,
    #[arg(long, default_value = "modifier")]
    pub modifier_col: String,
}

#[derive(Args, Clone)]
pub struct BasisArgs {
    /// Event-time B-spline degree.
    #[arg(long)]
    pub degree: Option<usize>,
    /// Modifier B-spline degree.
    #[arg(long)]
    pub degree_mod: Option<usize>,
    /// Interior knots on the event-time axis (quantiles of distinct failure times).
    #[arg(long)]
    pub knots_t: Option<usize>,
    /// Interior knots on the modifier axis (quantiles of the modifier values).
    #[arg(long)]
    pub knots_x: Option<usize>,
}

#[derive(Args, Clone)]
pub struct SolverArgs {
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub psi: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub max_line_search: Option<usize>,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Cause to fit (1..m), or "all".
    #[arg(long, default_value = "1")]
    pub cause: String,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Event-time smoothing parameter (with --penalty-mux enables penalization).
    #[arg(long)]
    pub penalty_mu: Option<f64>,
    /// Modifier smoothing parameter.
    #[arg(long)]
    pub penalty_mux: Option<f64>,
    /// Optional TOML config; command-line flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optional surface grid "lo:hi:count" over event time.
    #[arg(long)]
    pub t_grid: Option<String>,
    /// Optional surface grid "lo:hi:count" over the modifier.
    #[arg(long)]
    pub x_grid: Option<String>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct TestArgs {
    /// Stored fit artifact (fit_cause*.json).
    #[arg(long)]
    pub fit: PathBuf,
    /// Contrast kinds: event-time, modifier, joint.
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        "event-time".to_string(), "modifier".to_string(), "joint".to_string()
    ])]
    pub kinds: Vec<String>,
    /// Constructions: unpenalized, sandwich, model, gray.
    #[arg(long, value_delimiter = ',')]
    pub constructions: Vec<String>,
    /// Covariate index (0-based) or "all".
    #[arg(long, default_value = "all")]
    pub covariate: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "1")]
    pub cause: usize,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Methods: fc, cfc, uc, dr, gcv (comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = vec!["gcv".to_string()])]
    pub method: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub folds: usize,
    /// Use the default 5x5 grid (mu/sqrt(n) from 1e-5 to 1e-1).
    #[arg(long)]
    pub grid_default: bool,
    /// Explicit event-time grid values (comma-separated), crossed with --grid-mux.
    #[arg(long, value_delimiter = ',')]
    pub grid_mu: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_mux: Vec<f64>,
    /// Fold-partition seed (required: no hidden nondeterminism).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Event-time grid "lo:hi:count".
    #[arg(long)]
    pub t_grid: String,
    /// Modifier grid "lo:hi:count".
    #[arg(long)]
    pub x_grid: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Variance for the intervals: sandwich or model.
    #[arg(long, default_value = "sandwich")]
    pub variance: String,
    /// Covariate index (0-based) or "all".
    #[arg(long, default_value = "all")]
    pub covariate: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Generation seed (required: no hidden nondeterminism).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset path (default <out-dir>/simulated.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the Monte Carlo experiment described by the scenario's
    /// [experiment] section instead of emitting one dataset.
    #[arg(long)]
    pub experiment: bool,
    /// Override the experiment replicate count.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Override the experiment metrics (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct ResidualsArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Dataset to compute residuals on (CSV with the fit's schema).
    #[arg(long)]
    pub data: PathBuf,
    /// martingale or deviance.
    #[arg(long, default_value = "deviance")]
    pub kind: String,
    /// Recompute the baseline from this dataset instead of using the fit's
    /// stored (training-data) baseline.
    #[arg(long)]
    pub refit_baseline: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub struct CliError {
    pub code: i32,
    pub message: String,
    pub out_dir: Option<PathBuf>,
}

impl CliError {
    fn validation(out_dir: &Path, message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
            out_dir: Some(out_dir.to_path_buf()),
        }
    }

    fn non_convergence(out_dir: &Path, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
            out_dir: Some(out_dir.to_path_buf()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn fail(out_dir: &Path) -> impl Fn(anyhow::Error) -> CliError + '_ {
    move |e| CliError::validation(out_dir, format!("{e:#}"))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Test(args) => cmd_test(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Residuals(args) => cmd_residuals(args),
    }
}

/// TOML config file sections; command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    #[serde(default)]
    basis: FileBasis,
    #[serde(default)]
    solver: FileSolver,
    #[serde(default)]
    penalty: FilePenalty,
}

#[derive(Debug, Default, Deserialize)]
struct FileBasis {
    degree: Option<usize>,
    degree_mod: Option<usize>,
    knots_t: Option<usize>,
    knots_x: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct FileSolver {
    lambda0: Option<f64>,
    delta: Option<f64>,
    phi: Option<f64>,
    psi: Option<f64>,
    epsilon: Option<f64>,
    max_iter: Option<usize>,
    max_line_search: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct FilePenalty {
    mu: Option<f64>,
    mux: Option<f64>,
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<FileConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(toml::from_str(&text)?)
        }
        None => Ok(FileConfig::default()),
    }
}

fn resolve_basis(args: &BasisArgs, file: &FileBasis) -> BasisSettings {
    BasisSettings {
        degree_time: args.degree.or(file.degree).unwrap_or(3),
        degree_mod: args.degree_mod.or(file.degree_mod).unwrap_or(3),
        interior_time: args.knots_t.or(file.knots_t).unwrap_or(3),
        interior_mod: args.knots_x.or(file.knots_x).unwrap_or(3),
    }
}

fn resolve_solver(args: &SolverArgs, file: &FileSolver) -> SolverConfig {
    let d = SolverConfig::default();
    SolverConfig {
        lambda0: args.lambda0.or(file.lambda0).unwrap_or(d.lambda0),
        delta: args.delta.or(file.delta).unwrap_or(d.delta),
        phi: args.phi.or(file.phi).unwrap_or(d.phi),
        psi: args.psi.or(file.psi).unwrap_or(d.psi),
        epsilon: args.epsilon.or(file.epsilon).unwrap_or(d.epsilon),
        max_iterations: args.max_iter.or(file.max_iter).unwrap_or(d.max_iterations),
        max_line_search_steps: args
            .max_line_search
            .or(file.max_line_search)
            .unwrap_or(d.max_line_search_steps),
    }
}

/// Builds the CSV schema, peeking at the header to decide whether the
/// stratum column is present (absent means a single stratum).
fn build_schema(args: &DataArgs) -> anyhow::Result<CsvSchema> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&args.data)?;
    let headers = reader.headers()?.clone();
    let stratum_col = if headers.iter().any(|h| h == args.stratum_col) {
        Some(args.stratum_col.clone())
    } else {
        None
    };
    Ok(CsvSchema {
        stratum_col,
        time_col: args.time_col.clone(),
        cause_col: args.cause_col.clone(),
        modifier_col: args.modifier_col.clone(),
        z_cols: args.z_cols.clone(),
        w_cols: args.w_cols.clone(),
    })
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    anyhow::ensure!(parts.len() == 3, "grid spec must be lo:hi:count, got '{spec}'");
    let lo: f64 = parts[0].parse()?;
    let hi: f64 = parts[1].parse()?;
    let count: usize = parts[2].parse()?;
    anyhow::ensure!(count >= 2 && hi > lo, "grid spec must have hi > lo and count >= 2");
    Ok((0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect())
}

fn parse_kind(s: &str) -> anyhow::Result<ContrastKind> {
    match s {
        "event-time" | "t" => Ok(ContrastKind::EventTime),
        "modifier" | "x" => Ok(ContrastKind::Modifier),
        "joint" => Ok(ContrastKind::Joint),
        other => anyhow::bail!("unknown contrast kind '{other}'"),
    }
}

fn parse_construction(s: &str) -> anyhow::Result<TestConstruction> {
    match s {
        "unpenalized" | "unpenalized-chisq" => Ok(TestConstruction::UnpenalizedChisq),
        "sandwich" | "sandwich-chisq" => Ok(TestConstruction::SandwichChisq),
        "model" | "model-chisq" => Ok(TestConstruction::ModelChisq),
        "gray" | "gray-mixture" => Ok(TestConstruction::GrayMixture),
        other => anyhow::bail!("unknown construction '{other}'"),
    }
}

fn parse_method(s: &str) -> anyhow::Result<CvMethod> {
    match s {
        "fc" => Ok(CvMethod::Fc),
        "cfc" => Ok(CvMethod::Cfc),
        "uc" => Ok(CvMethod::Uc),
        "dr" => Ok(CvMethod::Dr),
        "gcv" => Ok(CvMethod::Gcv),
        other => anyhow::bail!("unknown cv method '{other}'"),
    }
}

fn parse_metric(s: &str) -> anyhow::Result<Metric> {
    match s {
        "imse" => Ok(Metric::Imse),
        "bias" => Ok(Metric::Bias),
        "variance" => Ok(Metric::Variance),
        "coverage" => Ok(Metric::Coverage),
        "type-i" | "type1" => Ok(Metric::TypeI),
        "power" => Ok(Metric::Power),
        "cv-comparison" => Ok(Metric::CvComparison),
        other => anyhow::bail!("unknown metric '{other}'"),
    }
}

fn ensure_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes a CSV file with a leading manifest-hash comment line.
fn write_csv(path: &Path, manifest_hash: &str, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut out = String::with_capacity(rows.len() * 32 + 128);
    out.push_str(&format!("# manifest_hash={manifest_hash}\n"));
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_fit(args: FitArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let file_cfg = load_config(args.config.as_ref()).map_err(fail(&out_dir))?;
    let basis_cfg = resolve_basis(&args.basis, &file_cfg.basis);
    let solver_cfg = resolve_solver(&args.solver, &file_cfg.solver);
    solver_cfg
        .validate()
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let penalty_mu = args.penalty_mu.or(file_cfg.penalty.mu);
    let penalty_mux = args.penalty_mux.or(file_cfg.penalty.mux);
    let penalty_pair = match (penalty_mu, penalty_mux) {
        (Some(mu), Some(mux)) => Some((mu, mux)),
        (None, None) => None,
        _ => {
            return Err(CliError::validation(
                &out_dir,
                "penalty requires both --penalty-mu and --penalty-mux",
            ))
        }
    };

    let schema = build_schema(&args.data).map_err(fail(&out_dir))?;
    let ds = Dataset::ingest_csv(&args.data.data, &schema)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    println!(
        "ingested n={} strata={} causes={} events_per_cause={:?} dropped_zero_time={}",
        ds.len(),
        ds.strata_count(),
        ds.n_causes(),
        &ds.counts_per_cause()[1..],
        ds.dropped_zero_time
    );

    let causes: Vec<usize> = if args.cause == "all" {
        let counts = ds.counts_per_cause();
        (1..=ds.n_causes()).filter(|&j| counts[j] > 0).collect()
    } else {
        vec![args
            .cause
            .parse()
            .map_err(|_| CliError::validation(&out_dir, "cause must be an integer or 'all'"))?]
    };

    let resolved = serde_json::json!({
        "data": args.data.data,
        "schema": schema,
        "causes": causes,
        "basis": basis_cfg,
        "solver": solver_cfg,
        "penalty": penalty_pair,
        "t_grid": args.t_grid,
        "x_grid": args.x_grid,
        "threads": args.threads,
        "out_dir": out_dir,
    });
    let manifest = Manifest::new("fit", resolved, Some(&args.data.data)).map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;

    let basis = basis_cfg
        .build(&ds)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    println!(
        "basis: K={} (degree {}, {} interior knots, {} dropped), K_mod={} (degree {}, {} interior, {} dropped)",
        basis.time.len(),
        basis.time.degree(),
        basis.time.interior_knots().len(),
        basis.time.dropped_knots(),
        basis.modifier.len(),
        basis.modifier.degree(),
        basis.modifier.interior_knots().len(),
        basis.modifier.dropped_knots(),
    );
    let index = build_risk_index(&ds);
    let ctx = EvalContext::new(&ds, &index, &basis)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let penalty = penalty_pair.map(|(mu, mux)| PenaltyConfig::uniform(ds.p(), mu, mux));

    let mut any_nonconverged = None;
    for &cause in &causes {
        let fit = coxsurf_core::solver::fit_with_context(
            &ctx,
            cause,
            penalty.as_ref(),
            &solver_cfg,
            None,
        )
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
        let baseline = coxsurf_core::baseline::breslow_baseline_with_context(
            &ctx,
            &fit.coefficients,
            cause,
        )
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
        println!(
            "cause {cause}: converged={} iterations={} loglik={:.6}{}",
            fit.converged,
            fit.iterations,
            fit.log_likelihood,
            fit.penalized_log_likelihood
                .map(|v| format!(" penalized={v:.6}"))
                .unwrap_or_default()
        );
        if !fit.converged {
            any_nonconverged = Some(cause);
        }
        let artifact = FitArtifact::from_fit(
            &fit,
            &basis,
            &schema,
            &ds.z_names,
            &ds.w_names,
            baseline.clone(),
            ctx.clamped_records,
            manifest.manifest_hash.clone(),
        );
        artifact
            .save(&out_dir.join(format!("fit_cause{cause}.json")))
            .map_err(fail(&out_dir))?;

        // Baseline hazard CSV.
        let mut rows = Vec::new();
        for (g, steps) in baseline.strata.iter().enumerate() {
            let label = &ds.stratum_labels()[g];
            let mut cum = 0.0;
            for step in steps {
                cum += step.increment;
                rows.push(format!("{label},{},{},{}", step.time, step.increment, cum));
            }
        }
        write_csv(
            &out_dir.join(format!("baseline_cause{cause}.csv")),
            &manifest.manifest_hash,
            "stratum,time,increment,cumulative",
            &rows,
        )
        .map_err(fail(&out_dir))?;

        // Optional surface grid.
        if let (Some(tg), Some(xg)) = (&args.t_grid, &args.x_grid) {
            let t_grid = parse_grid(tg).map_err(fail(&out_dir))?;
            let x_grid = parse_grid(xg).map_err(fail(&out_dir))?;
            let var = variance_estimates(&fit)
                .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
            let mut rows = Vec::new();
            for l in 0..ds.p() {
                let pts = pointwise_ci(
                    &fit,
                    &var,
                    &basis,
                    l,
                    &t_grid,
                    &x_grid,
                    0.95,
                    VarianceKind::Sandwich,
                )
                .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
                for p in pts {
                    rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        ds.z_names[l], p.t, p.x_mod, p.estimate, p.se, p.lo, p.hi
                    ));
                }
            }
            write_csv(
                &out_dir.join(format!("surface_cause{cause}.csv")),
                &manifest.manifest_hash,
                "covariate,t,x,estimate,se,lo,hi",
                &rows,
            )
            .map_err(fail(&out_dir))?;
        }
    }

    if let Some(cause) = any_nonconverged {
        return Err(CliError::non_convergence(
            &out_dir,
            format!("fit for cause {cause} did not converge within the iteration cap"),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct TestRecord<'a> {
    manifest_hash: &'a str,
    covariate_name: &'a str,
    #[serde(flatten)]
    result: coxsurf_core::TestResult,
}

fn cmd_test(args: TestArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let artifact = FitArtifact::load(&args.fit).map_err(fail(&out_dir))?;
    let fit = artifact.to_fit_result();
    if !fit.converged {
        return Err(CliError::validation(&out_dir, "stored fit did not converge"));
    }
    let kinds: Vec<ContrastKind> = args
        .kinds
        .iter()
        .map(|s| parse_kind(s))
        .collect::<anyhow::Result<_>>()
        .map_err(fail(&out_dir))?;
    let constructions: Vec<TestConstruction> = if args.constructions.is_empty() {
        if artifact.penalty.is_some() {
            vec![TestConstruction::SandwichChisq]
        } else {
            vec![TestConstruction::UnpenalizedChisq]
        }
    } else {
        args.constructions
            .iter()
            .map(|s| parse_construction(s))
            .collect::<anyhow::Result<_>>()
            .map_err(fail(&out_dir))?
    };
    let covariates: Vec<usize> = if args.covariate == "all" {
        (0..artifact.layout.p).collect()
    } else {
        vec![args
            .covariate
            .parse()
            .map_err(|_| CliError::validation(&out_dir, "covariate must be an index or 'all'"))?]
    };

    let resolved = serde_json::json!({
        "fit": args.fit,
        "kinds": kinds,
        "constructions": constructions,
        "covariates": covariates,
    });
    let manifest = Manifest::new("test", resolved, Some(&args.fit)).map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;

    let var = variance_estimates(&fit)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let path = out_dir.join("tests.jsonl");
    let mut file = std::fs::File::create(&path).map_err(|e| {
        CliError::validation(&out_dir, format!("writing {}: {e}", path.display()))
    })?;
    for &covariate in &covariates {
        for &kind in &kinds {
            for &construction in &constructions {
                let result = wald_test(&fit, &var, kind, construction, covariate)
                    .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
                println!(
                    "covariate {} {:?} {:?}: statistic={:.6} p={:.6}",
                    artifact.z_names[covariate],
                    kind,
                    construction,
                    result.statistic,
                    result.p_value
                );
                let record = TestRecord {
                    manifest_hash: &manifest.manifest_hash,
                    covariate_name: &artifact.z_names[covariate],
                    result,
                };
                writeln!(file, "{}", serde_json::to_string(&record).unwrap())
                    .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn cmd_cv(args: CvArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let seed = args.seed.ok_or_else(|| {
        CliError::validation(&out_dir, "--seed is required for cv (no hidden nondeterminism)")
    })?;
    let file_cfg = load_config(args.config.as_ref()).map_err(fail(&out_dir))?;
    let basis_cfg = resolve_basis(&args.basis, &file_cfg.basis);
    let solver_cfg = resolve_solver(&args.solver, &file_cfg.solver);
    let methods: Vec<CvMethod> = args
        .method
        .iter()
        .map(|s| parse_method(s))
        .collect::<anyhow::Result<_>>()
        .map_err(fail(&out_dir))?;

    let schema = build_schema(&args.data).map_err(fail(&out_dir))?;
    let ds = Dataset::ingest_csv(&args.data.data, &schema)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let grid: Vec<(f64, f64)> = if args.grid_default || (args.grid_mu.is_empty()) {
        default_grid(ds.len())
    } else {
        let mux = if args.grid_mux.is_empty() {
            args.grid_mu.clone()
        } else {
            args.grid_mux.clone()
        };
        let mut g = Vec::new();
        for &mt in &args.grid_mu {
            for &mm in &mux {
                g.push((mt, mm));
            }
        }
        g
    };

    let resolved = serde_json::json!({
        "data": args.data.data,
        "schema": schema,
        "cause": args.cause,
        "basis": basis_cfg,
        "solver": solver_cfg,
        "methods": methods,
        "folds": args.folds,
        "grid": grid,
        "seed": seed,
        "threads": args.threads,
    });
    let manifest = Manifest::new("cv", resolved, Some(&args.data.data)).map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;

    let basis = basis_cfg
        .build(&ds)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let index = build_risk_index(&ds);
    let assignment = partition_folds(&ds, args.folds, seed)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let reports = tune_all(
        &ds,
        &index,
        &basis,
        &assignment,
        &grid,
        &methods,
        args.cause,
        &solver_cfg,
    )
    .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    for report in &reports {
        let (mu, mux) = report.selected_pair();
        println!(
            "method {}: selected mu={mu} mux={mux} over {} grid points",
            report.method,
            report.points.len()
        );
        let wrapped = serde_json::json!({
            "manifest_hash": manifest.manifest_hash,
            "report": report,
        });
        std::fs::write(
            out_dir.join(format!("cv_cause{}_{}.json", args.cause, report.method)),
            serde_json::to_string_pretty(&wrapped).unwrap(),
        )
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let artifact = FitArtifact::load(&args.fit).map_err(fail(&out_dir))?;
    let fit = artifact.to_fit_result();
    let basis = artifact.model_basis();
    let t_grid = parse_grid(&args.t_grid).map_err(fail(&out_dir))?;
    let x_grid = parse_grid(&args.x_grid).map_err(fail(&out_dir))?;
    let which = match args.variance.as_str() {
        "sandwich" => VarianceKind::Sandwich,
        "model" => VarianceKind::Model,
        other => {
            return Err(CliError::validation(
                &out_dir,
                format!("unknown variance '{other}'"),
            ))
        }
    };
    let covariates: Vec<usize> = if args.covariate == "all" {
        (0..artifact.layout.p).collect()
    } else {
        vec![args
            .covariate
            .parse()
            .map_err(|_| CliError::validation(&out_dir, "covariate must be an index or 'all'"))?]
    };
    let resolved = serde_json::json!({
        "fit": args.fit,
        "t_grid": args.t_grid,
        "x_grid": args.x_grid,
        "level": args.level,
        "variance": args.variance,
        "covariates": covariates,
    });
    let manifest = Manifest::new("predict", resolved, Some(&args.fit)).map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;

    let clamped_t = t_grid.iter().filter(|&&t| basis.time.clamps(t)).count();
    let clamped_x = x_grid
        .iter()
        .filter(|&&x| basis.modifier.clamps(x))
        .count();
    if clamped_t + clamped_x > 0 {
        println!(
            "warning: {clamped_t} event-time and {clamped_x} modifier grid values outside the training range were clamped to the boundary"
        );
    }

    let var = variance_estimates(&fit)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let mut rows = Vec::new();
    for &l in &covariates {
        let pts = pointwise_ci(&fit, &var, &basis, l, &t_grid, &x_grid, args.level, which)
            .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
        for p in pts {
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                artifact.z_names[l], p.t, p.x_mod, p.estimate, p.se, p.lo, p.hi
            ));
        }
    }
    write_csv(
        &out_dir.join("surface.csv"),
        &manifest.manifest_hash,
        "covariate,t,x,estimate,se,lo,hi",
        &rows,
    )
    .map_err(fail(&out_dir))?;
    println!("wrote {} grid rows", rows.len());
    Ok(())
}

/// Scenario file: the scenario fields at the top level plus an optional
/// [experiment] section.
#[derive(Debug, Deserialize)]
struct ScenarioFile {
    #[serde(flatten)]
    scenario: ScenarioToml,
    experiment: Option<ExperimentSection>,
}

#[derive(Debug, Deserialize)]
struct ScenarioToml {
    n: usize,
    #[serde(default = "default_correlation")]
    correlation: f64,
    surface: coxsurf_core::TrueSurface,
    #[serde(default = "default_beta2")]
    beta_invariant: f64,
    #[serde(default = "default_modifier_range")]
    modifier_range: (f64, f64),
    #[serde(default = "default_censoring_range")]
    censoring_range: (f64, f64),
    #[serde(default = "default_baseline_hazard")]
    baseline_hazard: f64,
    #[serde(default = "default_horizon")]
    horizon: f64,
}

fn default_correlation() -> f64 {
    0.6
}
fn default_beta2() -> f64 {
    1.0
}
fn default_modifier_range() -> (f64, f64) {
    (0.0, 50.0)
}
fn default_censoring_range() -> (f64, f64) {
    (0.0, 30.0)
}
fn default_baseline_hazard() -> f64 {
    0.1
}
fn default_horizon() -> f64 {
    30.0
}

#[derive(Debug, Deserialize)]
struct ExperimentSection {
    replicates: usize,
    metrics: Vec<String>,
    #[serde(default)]
    basis: Option<BasisSettings>,
    penalty: Option<(f64, f64)>,
    #[serde(default)]
    solver: FileSolver,
    #[serde(default = "default_grid_points")]
    grid_points: usize,
    time_slices: Option<Vec<f64>>,
    modifier_slices: Option<Vec<f64>>,
    constructions: Option<Vec<String>>,
    #[serde(default = "default_alpha")]
    alpha: f64,
    cv: Option<CvSection>,
}

fn default_grid_points() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
struct CvSection {
    #[serde(default = "default_folds")]
    folds: usize,
    methods: Option<Vec<String>>,
    testing_n: Option<usize>,
    #[serde(default = "default_imse_grid")]
    imse_grid: usize,
}

fn default_folds() -> usize {
    4
}
fn default_imse_grid() -> usize {
    101
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let seed = args.seed.ok_or_else(|| {
        CliError::validation(
            &out_dir,
            "--seed is required for simulate (no hidden nondeterminism)",
        )
    })?;
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| {
        CliError::validation(&out_dir, format!("reading {}: {e}", args.scenario.display()))
    })?;
    let file: ScenarioFile =
        toml::from_str(&text).map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let scenario = ScenarioConfig {
        n: file.scenario.n,
        correlation: file.scenario.correlation,
        surface: file.scenario.surface,
        beta_invariant: file.scenario.beta_invariant,
        modifier_range: file.scenario.modifier_range,
        censoring_range: file.scenario.censoring_range,
        baseline_hazard: file.scenario.baseline_hazard,
        horizon: file.scenario.horizon,
        seed,
    };

    if args.experiment {
        let section = file.experiment.ok_or_else(|| {
            CliError::validation(&out_dir, "scenario file has no [experiment] section")
        })?;
        let metric_names: Vec<String> = if args.metrics.is_empty() {
            section.metrics.clone()
        } else {
            args.metrics.clone()
        };
        let metrics = metric_names
            .iter()
            .map(|s| parse_metric(s))
            .collect::<anyhow::Result<Vec<Metric>>>()
            .map_err(fail(&out_dir))?;
        let mut cfg = ExperimentConfig::new(
            scenario,
            args.replicates.unwrap_or(section.replicates),
            metrics,
        );
        if let Some(b) = section.basis {
            cfg.basis = b;
        }
        cfg.penalty = section.penalty;
        cfg.solver = resolve_solver(
            &SolverArgs {
                lambda0: None,
                delta: None,
                phi: None,
                psi: None,
                epsilon: None,
                max_iter: None,
                max_line_search: None,
            },
            &section.solver,
        );
        cfg.grid_points = section.grid_points;
        if let Some(ts) = section.time_slices {
            cfg.time_slices = ts;
        }
        if let Some(ms) = section.modifier_slices {
            cfg.modifier_slices = ms;
        }
        if let Some(cs) = section.constructions {
            cfg.test_constructions = cs
                .iter()
                .map(|s| parse_construction(s))
                .collect::<anyhow::Result<_>>()
                .map_err(fail(&out_dir))?;
        }
        cfg.alpha = section.alpha;
        if let Some(cv) = section.cv {
            let methods = match cv.methods {
                Some(m) => m
                    .iter()
                    .map(|s| parse_method(s))
                    .collect::<anyhow::Result<_>>()
                    .map_err(fail(&out_dir))?,
                None => CvMethod::ALL.to_vec(),
            };
            cfg.cv = Some(CvExperiment {
                folds: cv.folds,
                methods,
                grid: None,
                testing_n: cv.testing_n,
                imse_grid: cv.imse_grid,
            });
        }
        cfg.threads = args.threads;

        let resolved = serde_json::to_value(&cfg).unwrap();
        let manifest =
            Manifest::new("simulate-experiment", resolved, Some(&args.scenario))
                .map_err(fail(&out_dir))?;
        manifest.save(&out_dir).map_err(fail(&out_dir))?;

        let report = coxsurf_core::run_experiment(&cfg)
            .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
        std::fs::write(
            out_dir.join("metrics.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "manifest_hash": manifest.manifest_hash,
                "report": report,
            }))
            .unwrap(),
        )
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
        write_experiment_csvs(&out_dir, &manifest.manifest_hash, &report)
            .map_err(fail(&out_dir))?;
        println!(
            "experiment complete: {} of {} replicates used, {} failures",
            report.replicates_used,
            report.replicates_requested,
            report.failures.len()
        );
        return Ok(());
    }

    let resolved = serde_json::to_value(&scenario).unwrap();
    let manifest = Manifest::new("simulate", resolved, Some(&args.scenario))
        .map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;
    let ds = coxsurf_core::generate_dataset(&scenario, seed)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let out_path = args.out.unwrap_or_else(|| out_dir.join("simulated.csv"));
    let mut rows = Vec::with_capacity(ds.len());
    for r in ds.records() {
        rows.push(format!(
            "{},{},{},{},{},{}",
            ds.stratum_labels()[r.stratum],
            r.time,
            r.cause,
            r.modifier,
            r.z[0],
            r.w[0]
        ));
    }
    write_csv(
        &out_path,
        &manifest.manifest_hash,
        "stratum,time,cause,modifier,z1,w1",
        &rows,
    )
    .map_err(fail(&out_dir))?;

    // Truth tables for scoring fitted surfaces.
    let t_grid: Vec<f64> = (0..101)
        .map(|i| scenario.horizon * i as f64 / 100.0)
        .collect();
    let x_grid: Vec<f64> = (0..101)
        .map(|i| {
            scenario.modifier_range.0
                + (scenario.modifier_range.1 - scenario.modifier_range.0) * i as f64 / 100.0
        })
        .collect();
    let mut rows = Vec::with_capacity(101 * 101);
    for &x in &x_grid {
        for &t in &t_grid {
            rows.push(format!("{t},{x},{}", scenario.surface.eval(t, x)));
        }
    }
    write_csv(
        &out_dir.join("truth_surface.csv"),
        &manifest.manifest_hash,
        "t,x,beta1",
        &rows,
    )
    .map_err(fail(&out_dir))?;
    std::fs::write(
        out_dir.join("truth.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "manifest_hash": manifest.manifest_hash,
            "beta_invariant": scenario.beta_invariant,
            "surface": scenario.surface,
            "events": ds.counts_per_cause()[1..].to_vec(),
            "n": ds.len(),
        }))
        .unwrap(),
    )
    .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    println!(
        "wrote {} records ({} events) to {}",
        ds.len(),
        ds.counts_per_cause()[1],
        out_path.display()
    );
    Ok(())
}

fn write_experiment_csvs(
    out_dir: &Path,
    hash: &str,
    report: &coxsurf_core::MetricsReport,
) -> anyhow::Result<()> {
    if let Some(est) = &report.estimation {
        let rows: Vec<String> = est
            .t_grid
            .iter()
            .enumerate()
            .map(|(i, t)| {
                format!(
                    "{t},{},{},{}",
                    est.imse_event[i], est.bias_event[i], est.variance_event[i]
                )
            })
            .collect();
        write_csv(
            &out_dir.join("estimation_event.csv"),
            hash,
            "t,imse,bias,variance",
            &rows,
        )?;
        let rows: Vec<String> = est
            .x_grid
            .iter()
            .enumerate()
            .map(|(i, x)| {
                format!(
                    "{x},{},{},{}",
                    est.imse_calendar[i], est.bias_calendar[i], est.variance_calendar[i]
                )
            })
            .collect();
        write_csv(
            &out_dir.join("estimation_calendar.csv"),
            hash,
            "x,imse,bias,variance",
            &rows,
        )?;
        let mut rows = Vec::new();
        for slice in &est.slices {
            let (axis, fixed) = match slice.axis {
                coxsurf_core::sim::SliceAxis::EventTime { modifier } => ("event-time", modifier),
                coxsurf_core::sim::SliceAxis::Calendar { time } => ("calendar", time),
            };
            for (i, &g) in slice.grid.iter().enumerate() {
                rows.push(format!(
                    "{axis},{fixed},{g},{},{},{},{},{}",
                    slice.truth[i],
                    slice.mean[i],
                    slice.lo[i],
                    slice.hi[i],
                    slice
                        .coverage
                        .as_ref()
                        .map(|c| c[i].to_string())
                        .unwrap_or_default()
                ));
            }
        }
        write_csv(
            &out_dir.join("slices.csv"),
            hash,
            "axis,fixed,grid,truth,mean,lo,hi,coverage",
            &rows,
        )?;
    }
    if let Some(rej) = &report.rejection {
        let rows: Vec<String> = rej
            .rates
            .iter()
            .map(|r| {
                format!(
                    "{:?},{:?},{},{},{}",
                    r.kind, r.construction, r.rejected, r.total, r.rate
                )
            })
            .collect();
        write_csv(
            &out_dir.join("rejection.csv"),
            hash,
            "kind,construction,rejected,total,rate",
            &rows,
        )?;
    }
    if let Some(cv) = &report.cv_comparison {
        let mut rows = Vec::new();
        for rec in &cv.per_replicate {
            for (mi, method) in cv.methods.iter().enumerate() {
                rows.push(format!(
                    "{},{method},{},{},{},{},{}",
                    rec.replicate,
                    rec.selected[mi].0,
                    rec.selected[mi].1,
                    rec.train_neg2ll[mi],
                    rec.test_neg2ll[mi],
                    rec.imse[mi]
                ));
            }
        }
        write_csv(
            &out_dir.join("cv_comparison.csv"),
            hash,
            "replicate,method,selected_mu,selected_mux,train_neg2ll,test_neg2ll,imse",
            &rows,
        )?;
    }
    Ok(())
}

fn cmd_residuals(args: ResidualsArgs) -> CliResult {
    let out_dir = args.out_dir.clone();
    ensure_out_dir(&out_dir).map_err(fail(&out_dir))?;
    let artifact = FitArtifact::load(&args.fit).map_err(fail(&out_dir))?;
    let ds = Dataset::ingest_csv(&args.data, &artifact.schema)
        .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;
    let basis = artifact.model_basis();
    let index = build_risk_index(&ds);
    let coeffs = coxsurf_core::Coefficients {
        gamma: artifact.gamma.clone(),
        theta: artifact.theta.clone(),
    };
    let resolved = serde_json::json!({
        "fit": args.fit,
        "data": args.data,
        "kind": args.kind,
        "refit_baseline": args.refit_baseline,
    });
    let manifest = Manifest::new("residuals", resolved, Some(&args.data))
        .map_err(fail(&out_dir))?;
    manifest.save(&out_dir).map_err(fail(&out_dir))?;

    let baseline = if args.refit_baseline {
        breslow_baseline(&ds, &index, &basis, &coeffs, artifact.cause)
            .map_err(|e| CliError::validation(&out_dir, e.to_string()))?
    } else {
        artifact.baseline.clone()
    };
    if baseline.strata.len() != ds.strata_count() {
        return Err(CliError::validation(
            &out_dir,
            "stored baseline strata do not match the dataset; pass --refit-baseline",
        ));
    }
    let residuals = match args.kind.as_str() {
        "martingale" => martingale_residuals(&ds, &index, &basis, &coeffs, &baseline, artifact.cause),
        "deviance" => deviance_residuals(&ds, &index, &basis, &coeffs, &baseline, artifact.cause),
        other => {
            return Err(CliError::validation(
                &out_dir,
                format!("unknown residual kind '{other}'"),
            ))
        }
    }
    .map_err(|e| CliError::validation(&out_dir, e.to_string()))?;

    let rows: Vec<String> = ds
        .records()
        .iter()
        .zip(&residuals)
        .enumerate()
        .map(|(i, (r, res))| {
            format!(
                "{},{},{},{},{},{res}",
                i + 1,
                ds.stratum_labels()[r.stratum],
                r.time,
                r.cause,
                r.modifier
            )
        })
        .collect();
    write_csv(
        &out_dir.join("residuals.csv"),
        &manifest.manifest_hash,
        "row,stratum,time,cause,modifier,residual",
        &rows,
    )
    .map_err(fail(&out_dir))?;
    println!("wrote {} residuals ({})", rows.len(), args.kind);
    Ok(())
}
